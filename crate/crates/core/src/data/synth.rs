//! Toy NL→SQL generator over four small schemas. Gold SQL is emitted in
//! space-separated token form so a word-level model can reproduce it
//! character for character.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatabaseSchema, Example, Table};

const VALUES: [u32; 9] = [10, 20, 30, 40, 50, 60, 70, 80, 90];

fn table(name: &str, columns: &[&str]) -> Table {
    Table {
        name: name.to_string(),
        columns: columns.iter().map(|c| c.to_string()).collect(),
    }
}

fn numeric_columns(table: &str) -> &'static [&'static str] {
    match table {
        "employees" => &["age", "salary"],
        "products" => &["price", "stock"],
        "students" => &["age"],
        "courses" => &["credits"],
        "flights" => &["duration"],
        _ => &[],
    }
}

pub fn toy_schemas() -> Vec<DatabaseSchema> {
    vec![
        DatabaseSchema {
            db_id: "company".into(),
            tables: vec![table("employees", &["id", "name", "age", "salary"])],
        },
        DatabaseSchema {
            db_id: "store".into(),
            tables: vec![table("products", &["id", "title", "price", "stock"])],
        },
        DatabaseSchema {
            db_id: "school".into(),
            tables: vec![
                table("students", &["id", "name", "age", "city"]),
                table("courses", &["id", "title", "credits"]),
            ],
        },
        DatabaseSchema {
            db_id: "airline".into(),
            tables: vec![table("flights", &["id", "origin", "destination", "duration"])],
        },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Comparison {
    Eq,
    Gt,
    Lt,
}

impl Comparison {
    const ALL: [Comparison; 3] = [Comparison::Eq, Comparison::Gt, Comparison::Lt];

    fn symbol(self) -> &'static str {
        match self {
            Comparison::Eq => "=",
            Comparison::Gt => ">",
            Comparison::Lt => "<",
        }
    }

    fn words(self) -> &'static str {
        match self {
            Comparison::Eq => "equal to",
            Comparison::Gt => "greater than",
            Comparison::Lt => "less than",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregate {
    Avg,
    Max,
    Min,
    Sum,
    Count,
}

impl Aggregate {
    const ALL: [Aggregate; 5] = [Aggregate::Avg, Aggregate::Max, Aggregate::Min, Aggregate::Sum, Aggregate::Count];

    fn keyword(self) -> &'static str {
        match self {
            Aggregate::Avg => "AVG",
            Aggregate::Max => "MAX",
            Aggregate::Min => "MIN",
            Aggregate::Sum => "SUM",
            Aggregate::Count => "COUNT",
        }
    }
}

/// A query from the three template families.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SynthQuery {
    Select {
        table: String,
        column: String,
    },
    Filter {
        table: String,
        column: String,
        filter_column: String,
        op: Comparison,
        value: u32,
    },
    Aggregate {
        table: String,
        column: String,
        agg: Aggregate,
    },
}

impl SynthQuery {
    pub fn to_sql(&self) -> String {
        match self {
            SynthQuery::Select { table, column } => format!("SELECT {column} FROM {table}"),
            SynthQuery::Filter {
                table,
                column,
                filter_column,
                op,
                value,
            } => format!("SELECT {column} FROM {table} WHERE {filter_column} {} {value}", op.symbol()),
            SynthQuery::Aggregate { table, column, agg } => {
                format!("SELECT {} ( {column} ) FROM {table}", agg.keyword())
            }
        }
    }

    pub fn question(&self) -> String {
        match self {
            SynthQuery::Select { table, column } => format!("show the {column} of all {table}"),
            SynthQuery::Filter {
                table,
                column,
                filter_column,
                op,
                value,
            } => format!("show the {column} of {table} whose {filter_column} is {} {value}", op.words()),
            SynthQuery::Aggregate { table, column, agg } => match agg {
                Aggregate::Avg => format!("what is the average {column} of {table} ?"),
                Aggregate::Max => format!("what is the maximum {column} of {table} ?"),
                Aggregate::Min => format!("what is the minimum {column} of {table} ?"),
                Aggregate::Sum => format!("what is the total {column} of {table} ?"),
                Aggregate::Count => format!("how many {column} values do {table} have ?"),
            },
        }
    }

    /// Recognises SQL produced by the grammar over the toy schemas.
    pub fn parse(sql: &str) -> Option<SynthQuery> {
        let toks: Vec<&str> = sql.split(' ').collect();
        let schemas = toy_schemas();
        let has_column = |t: &str, c: &str| {
            schemas
                .iter()
                .flat_map(|s| &s.tables)
                .any(|tb| tb.name == t && tb.columns.iter().any(|x| x == c))
        };
        let query = match toks.as_slice() {
            ["SELECT", column, "FROM", table] => SynthQuery::Select {
                table: table.to_string(),
                column: column.to_string(),
            },
            ["SELECT", column, "FROM", table, "WHERE", filter_column, op, value] => {
                let op = Comparison::ALL.into_iter().find(|c| c.symbol() == *op)?;
                let value: u32 = value.parse().ok()?;
                if !VALUES.contains(&value) || !numeric_columns(table).contains(filter_column) {
                    return None;
                }
                SynthQuery::Filter {
                    table: table.to_string(),
                    column: column.to_string(),
                    filter_column: filter_column.to_string(),
                    op,
                    value,
                }
            }
            ["SELECT", agg, "(", column, ")", "FROM", table] => {
                let agg = Aggregate::ALL.into_iter().find(|a| a.keyword() == *agg)?;
                if agg != Aggregate::Count && !numeric_columns(table).contains(column) {
                    return None;
                }
                SynthQuery::Aggregate {
                    table: table.to_string(),
                    column: column.to_string(),
                    agg,
                }
            }
            _ => return None,
        };
        let (t, c) = match &query {
            SynthQuery::Select { table, column }
            | SynthQuery::Filter { table, column, .. }
            | SynthQuery::Aggregate { table, column, .. } => (table, column),
        };
        has_column(t, c).then_some(query)
    }
}

fn pick<'a, T, R: Rng>(rng: &mut R, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

/// `n` question/SQL pairs over [`toy_schemas`], deterministic in `seed`.
pub fn synth_dataset(seed: u64, n: usize) -> (Vec<DatabaseSchema>, Vec<Example>) {
    let schemas = toy_schemas();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let schema = pick(&mut rng, &schemas);
        let tb = pick(&mut rng, &schema.tables);
        let column = pick(&mut rng, &tb.columns).clone();
        let table = tb.name.clone();
        let numeric = numeric_columns(&table);
        let query = match rng.random_range(0..3) {
            0 => SynthQuery::Select { table, column },
            1 => SynthQuery::Filter {
                filter_column: pick(&mut rng, numeric).to_string(),
                op: *pick(&mut rng, &Comparison::ALL),
                value: *pick(&mut rng, &VALUES),
                table,
                column,
            },
            _ => {
                let agg = *pick(&mut rng, &Aggregate::ALL);
                let column = if agg == Aggregate::Count {
                    column
                } else {
                    pick(&mut rng, numeric).to_string()
                };
                SynthQuery::Aggregate { table, column, agg }
            }
        };
        examples.push(Example {
            question: query.question(),
            gold_sql: query.to_sql(),
            db_id: schema.db_id.clone(),
        });
    }
    (schemas, examples)
}

/// Every (question, SQL) pair of the plain `SELECT col FROM table` family.
pub fn enumerate_select_column() -> Vec<(String, String)> {
    toy_schemas()
        .iter()
        .flat_map(|s| s.tables.clone())
        .flat_map(|t| {
            t.columns
                .iter()
                .map(|c| SynthQuery::Select {
                    table: t.name.clone(),
                    column: c.clone(),
                })
                .collect::<Vec<_>>()
        })
        .map(|q| (q.question(), q.to_sql()))
        .collect()
}
