use std::fs;
use std::path::{Path, PathBuf};

use lightsql::data::{
    format_examples, format_input, load_spider, make_training_pair, read_dataset, serialize_schema, split_indices,
    synth_dataset, write_dataset, DatabaseSchema, InputStyle, SynthQuery, Table,
};
use lightsql::metrics::lfacc;
use lightsql::numerics::IGNORE_INDEX;
use lightsql::tokenizer::{build_vocab, decode, normalize_text, BOS_ID, EOS_ID};
use lightsql::Error;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn employees() -> DatabaseSchema {
    DatabaseSchema::new(
        "company",
        vec![Table {
            name: "employees".into(),
            columns: vec!["id".into(), "name".into(), "age".into()],
        }],
    )
    .unwrap()
}

#[test]
fn fixture_loads_in_file_order() {
    let (schemas, examples) = load_spider(&fixture("tables.json"), &fixture("examples.json")).unwrap();
    assert_eq!(schemas.len(), 2);
    assert_eq!(examples.len(), 3);
    assert_eq!(
        serialize_schema(&schemas[0]),
        "stadium (Stadium_ID, Location, Capacity) ; singer (Singer_ID, Name, Age)"
    );
    assert_eq!(serialize_schema(&schemas[1]), "Pets (PetID, PetType, weight)");
    let ids: Vec<&str> = examples.iter().map(|e| e.db_id.as_str()).collect();
    assert_eq!(ids, ["concert_singer", "concert_singer", "pets_1"]);
    assert_eq!(examples[2].gold_sql, "SELECT max(weight) FROM Pets");
}

#[test]
fn running_example_templates_byte_for_byte() {
    let q = "What is the average age of employees?";
    let s = serialize_schema(&employees());
    assert_eq!(s, "employees (id, name, age)");
    assert_eq!(
        format_input(q, &s, InputStyle::T5Prefix),
        "translate SQL: What is the average age of employees? Schema: employees (id, name, age)"
    );
    assert_eq!(
        format_input(q, &s, InputStyle::BartPrefix),
        "Question: What is the average age of employees? Schema: employees (id, name, age)"
    );
    assert_eq!(
        format_input(q, &s, InputStyle::Gpt2Prompt),
        "Question: What is the average age of employees? Schema: employees (id, name, age) SQL:"
    );
}

#[test]
fn unresolved_db_id_names_the_example() {
    let dir = tempfile::tempdir().unwrap();
    let examples = dir.path().join("examples.json");
    fs::write(
        &examples,
        r#"[{"db_id": "pets_1", "question": "q", "query": "SELECT 1"},
            {"db_id": "nowhere", "question": "q", "query": "SELECT 1"}]"#,
    )
    .unwrap();
    let err = load_spider(&fixture("tables.json"), &examples).unwrap_err();
    assert!(matches!(err, Error::UnresolvedDbId { index: 1, .. }));
    assert!(err.to_string().contains("unresolved db_id"));
}

#[test]
fn malformed_records_report_path_and_index() {
    let dir = tempfile::tempdir().unwrap();
    let examples = dir.path().join("examples.json");
    fs::write(&examples, r#"[{"db_id": "pets_1", "question": "q", "query": "SELECT 1"}, {"db_id": "pets_1"}]"#).unwrap();
    match load_spider(&fixture("tables.json"), &examples).unwrap_err() {
        Error::Malformed { path, index, .. } => {
            assert_eq!(path, examples);
            assert_eq!(index, 1);
        }
        other => panic!("unexpected {other}"),
    }
    fs::write(&examples, "{not json").unwrap();
    assert!(matches!(load_spider(&fixture("tables.json"), &examples), Err(Error::Malformed { .. })));
    let missing = dir.path().join("absent.json");
    assert!(matches!(load_spider(&fixture("tables.json"), &missing), Err(Error::Io { .. })));
}

#[test]
fn empty_examples_file_is_empty_list() {
    let dir = tempfile::tempdir().unwrap();
    let examples = dir.path().join("examples.json");
    fs::write(&examples, "[]").unwrap();
    let (_, ex) = load_spider(&fixture("tables.json"), &examples).unwrap();
    assert!(ex.is_empty());
}

#[test]
fn supervised_labels_reproduce_the_gold_sql() {
    let (schemas, examples) = load_spider(&fixture("tables.json"), &fixture("examples.json")).unwrap();
    let (syn_schemas, syn_examples) = synth_dataset(0, 64);
    for style in InputStyle::ALL {
        let mut rows = format_examples(&schemas, &examples, style).unwrap();
        rows.extend(format_examples(&syn_schemas, &syn_examples, style).unwrap());
        let corpus: Vec<String> = rows.iter().flat_map(|r| [r.formatted_input.clone(), r.gold_sql.clone()]).collect();
        let vocab = build_vocab(&corpus, 10_000).unwrap();
        for row in &rows {
            let pair = make_training_pair(&row.formatted_input, &row.gold_sql, style, &vocab, 256).unwrap();
            if style.is_decoder_only() {
                assert_eq!(pair.input_ids.len(), pair.label_ids.len());
            }
            let supervised: Vec<u32> = pair
                .label_ids
                .iter()
                .filter(|&&l| l != IGNORE_INDEX)
                .map(|&l| l as u32)
                .filter(|&id| id != BOS_ID && id != EOS_ID)
                .collect();
            let text = decode(&supervised, &vocab);
            assert_eq!(text, normalize_text(&row.gold_sql), "{style}");
            assert!(lfacc(&text, &row.gold_sql));
            assert_eq!(pair.label_ids.iter().rev().find(|&&l| l != IGNORE_INDEX), Some(&(EOS_ID as i64)));
        }
    }
}

#[test]
fn dataset_file_round_trips() {
    let (schemas, examples) = synth_dataset(1, 20);
    let rows = format_examples(&schemas, &examples, InputStyle::T5Prefix).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.tsv");
    write_dataset(&path, &rows).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), rows);
}

#[test]
fn synthetic_gold_sql_stays_in_grammar() {
    let (schemas, examples) = synth_dataset(0, 64);
    assert_eq!(schemas.len(), 4);
    assert_eq!(examples.len(), 64);
    assert!(examples.iter().all(|e| SynthQuery::parse(&e.gold_sql).is_some()));
    assert_eq!(synth_dataset(0, 64), synth_dataset(0, 64));
    assert_ne!(synth_dataset(0, 64).1, synth_dataset(1, 64).1);
}

#[test]
fn splits_partition_the_examples() {
    let [train, valid, test] = split_indices(100, 0.1, 0.2, 4).unwrap();
    assert_eq!((train.len(), valid.len(), test.len()), (70, 10, 20));
    let mut all: Vec<usize> = train.iter().chain(&valid).chain(&test).copied().collect();
    all.sort();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    assert!(split_indices(10, 0.6, 0.5, 0).is_err());
}
