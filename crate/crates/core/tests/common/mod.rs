#![allow(dead_code)]

use std::path::PathBuf;

use serde_json::Value;

fn schema_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

fn read_json(name: &str) -> Value {
    let path = schema_dir().join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap()
}

/// Serves sibling schema files for relative `$ref`s.
struct SchemaDir;

impl jsonschema::Retrieve for SchemaDir {
    fn retrieve(
        &self,
        uri: &jsonschema::Uri<String>,
    ) -> Result<Value, Box<dyn std::error::Error + Send + Sync>> {
        let name = uri
            .path()
            .as_str()
            .rsplit('/')
            .next()
            .unwrap_or_default()
            .to_string();
        Ok(read_json(&name))
    }
}

pub fn schema_errors(name: &str, instance: &Value) -> Vec<String> {
    let schema = read_json(&format!("{name}.schema.json"));
    let validator = jsonschema::options()
        .with_retriever(SchemaDir)
        .build(&schema)
        .unwrap_or_else(|e| panic!("schema {name}: {e}"));
    validator
        .iter_errors(instance)
        .map(|e| format!("{e} at {}", e.instance_path()))
        .collect()
}

/// Validate `instance` against `schemas/<name>.schema.json`.
pub fn assert_schema(name: &str, instance: &Value) {
    let errors = schema_errors(name, instance);
    assert!(errors.is_empty(), "{name}: {errors:#?}\n{instance:#}");
}

pub fn csv_header(kind: &str) -> String {
    read_json("csv_headers.json")[kind]
        .as_str()
        .unwrap()
        .to_string()
}
