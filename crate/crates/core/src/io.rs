//! Versioned JSON documents for specs, constructions and models.
//!
//! Every document has the shape
//! `{"schema_version": 1, "kind": "...", "payload": {...}}`; matrices are
//! stored as `{"rows", "cols", "data"}` with `data` in row-major order.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Document<T> {
    schema_version: u32,
    kind: String,
    payload: T,
}

pub fn to_json<T: Serialize>(kind: &str, value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(&Document {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        payload: value,
    })?)
}

pub fn from_json<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    let doc: Document<T> = serde_json::from_str(text)?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::Contract(format!(
            "schema version {} is not supported (expected {SCHEMA_VERSION})",
            doc.schema_version
        )));
    }
    if doc.kind != kind {
        return Err(Error::Contract(format!("document holds a `{}`, expected `{kind}`", doc.kind)));
    }
    Ok(doc.payload)
}

pub fn save<T: Serialize>(path: &Path, kind: &str, value: &T) -> Result<()> {
    fs::write(path, to_json(kind, value)?)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    from_json(kind, &fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::construction::{build_sum_extraction, PhiMap, SumExtraction, SumExtractionConfig};
    use crate::multisym::enumerate_multidegrees;
    use crate::sumformer::SumformerModel;
    use crate::tensor::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constructions_round_trip() {
        for v in [AttentionKind::Standard, AttentionKind::Linformer, AttentionKind::Performer] {
            let c = build_sum_extraction(
                2,
                PhiMap::Monomial {
                    basis: enumerate_multidegrees(2, 3).unwrap(),
                },
                SumExtractionConfig::new(v, 3).with_k(2).with_seed(4),
            )
            .unwrap();
            let text = to_json("sum-extraction", &c).unwrap();
            let back: SumExtraction = from_json("sum-extraction", &text).unwrap();
            assert_eq!(back, c);
            let x = Matrix::from_rows(&[[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]]).unwrap();
            assert_eq!(back.forward(&x).unwrap(), c.forward(&x).unwrap());
        }
    }

    #[test]
    fn models_round_trip_through_files() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = SumformerModel::mlp(2, 4, 2, 6, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save(&path, "sumformer", &m).unwrap();
        assert_eq!(load::<SumformerModel>(&path, "sumformer").unwrap(), m);
        assert!(load::<SumformerModel>(&path, "sum-extraction").is_err());
    }

    #[test]
    fn wrong_version_is_rejected() {
        let text = r#"{"schema_version": 2, "kind": "matrix", "payload": {"rows": 1, "cols": 1, "data": [1.0]}}"#;
        assert!(from_json::<Matrix>("matrix", text).is_err());
        let ok = text.replace("2,", "1,");
        assert_eq!(from_json::<Matrix>("matrix", &ok).unwrap(), Matrix::filled(1, 1, 1.0));
    }
}
