//! Summary tables and their CSV encoding.
//!
//! Each file starts with a `# dmsgd <table> schema=<v>` line followed by a
//! fixed header row. Readers reject any other table name or version.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("missing schema header, expected `# dmsgd {0} schema={SCHEMA_VERSION}`")]
    MissingHeader(&'static str),
    #[error("file declares table `{found}`, expected `{expected}`")]
    WrongTable { expected: &'static str, found: String },
    #[error("unsupported {table} schema version {found} (this build reads {SCHEMA_VERSION})")]
    UnknownVersion { table: &'static str, found: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub trait Table: Serialize + DeserializeOwned {
    const NAME: &'static str;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRow {
    pub cell: usize,
    pub m: usize,
    pub alpha: f64,
    pub schedule: String,
    pub n: u64,
    pub seeds: usize,
    pub mean_grad_norm_sq: f64,
    pub stderr_grad_norm_sq: f64,
    pub tams: f64,
    pub tams_interp_err: f64,
    pub mean_loss: f64,
    pub stderr_loss: f64,
    pub mean_consensus: f64,
    pub stderr_consensus: f64,
    pub mean_u_v_norm: f64,
    pub mean_z_subopt: Option<f64>,
    pub stderr_z_subopt: Option<f64>,
}

impl Table for EnsembleRow {
    const NAME: &'static str = "ensemble";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HittingRow {
    pub cell: usize,
    pub m: usize,
    pub alpha: f64,
    pub schedule: String,
    /// Threshold as configured (absolute, or a fraction when relative).
    pub a0_spec: f64,
    pub a0: f64,
    pub seed: u64,
    /// Hit time, or the horizon when censored.
    pub tau: u64,
    pub censored: bool,
    pub partial_sum_at_tau: f64,
}

impl Table for HittingRow {
    const NAME: &'static str = "hitting";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub cell: usize,
    pub m: usize,
    pub alpha: f64,
    pub schedule: String,
    /// `averaged_iterate` or `z_sequence`.
    pub target: String,
    pub t: u64,
    pub subopt: f64,
    pub subopt_stderr: f64,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub prefactor: f64,
}

impl Table for RateRow {
    const NAME: &'static str = "ratefit";
}

pub fn header_line(name: &str) -> String {
    format!("# dmsgd {name} schema={SCHEMA_VERSION}\n")
}

pub fn to_csv<T: Table>(rows: &[T]) -> Result<Vec<u8>, TableError> {
    let mut out = header_line(T::NAME).into_bytes();
    {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut out);
        w.write_record(field_names::<T>())?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(csv::Error::from)?;
    }
    Ok(out)
}

/// Column names in declaration order, taken from serde.
fn field_names<T: Table>() -> Vec<&'static str> {
    use serde::de::{self, Deserializer, Visitor};
    struct Grab(Vec<&'static str>);
    impl<'de> Deserializer<'de> for &mut Grab {
        type Error = de::value::Error;
        fn deserialize_any<V: Visitor<'de>>(self, _: V) -> Result<V::Value, Self::Error> {
            Err(de::Error::custom("field names only"))
        }
        fn deserialize_struct<V: Visitor<'de>>(
            self,
            _: &'static str,
            fields: &'static [&'static str],
            _: V,
        ) -> Result<V::Value, Self::Error> {
            self.0.extend_from_slice(fields);
            Err(de::Error::custom("field names only"))
        }
        serde::forward_to_deserialize_any! {
            bool i8 i16 i32 i64 i128 u8 u16 u32 u64 u128 f32 f64 char str string
            bytes byte_buf option unit unit_struct newtype_struct seq tuple
            tuple_struct map enum identifier ignored_any
        }
    }
    let mut g = Grab(Vec::new());
    let _ = T::deserialize(&mut g);
    g.0
}

pub fn from_csv<T: Table>(bytes: &[u8]) -> Result<Vec<T>, TableError> {
    let text_end = bytes.iter().position(|b| *b == b'\n').unwrap_or(bytes.len());
    let first = std::str::from_utf8(&bytes[..text_end]).unwrap_or("").trim_end();
    let rest = first
        .strip_prefix("# dmsgd ")
        .ok_or(TableError::MissingHeader(T::NAME))?;
    let (name, version) = rest
        .split_once(" schema=")
        .ok_or(TableError::MissingHeader(T::NAME))?;
    if name != T::NAME {
        return Err(TableError::WrongTable {
            expected: T::NAME,
            found: name.to_string(),
        });
    }
    if version != SCHEMA_VERSION.to_string() {
        return Err(TableError::UnknownVersion {
            table: T::NAME,
            found: version.to_string(),
        });
    }
    let body = &bytes[(text_end + 1).min(bytes.len())..];
    let mut r = csv::ReaderBuilder::new().from_reader(body);
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(Into::into)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hit() -> HittingRow {
        HittingRow {
            cell: 0,
            m: 8,
            alpha: 0.9,
            schedule: "constant c=0.05".into(),
            a0_spec: 0.1,
            a0: 0.0071,
            seed: 42,
            tau: 17,
            censored: false,
            partial_sum_at_tau: 0.85,
        }
    }

    #[test]
    fn round_trip() {
        let rows = vec![hit(), HittingRow { censored: true, tau: 100, ..hit() }];
        let bytes = to_csv(&rows).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("# dmsgd hitting schema=1\ncell,m,alpha,schedule,a0_spec,a0,seed,tau,censored,partial_sum_at_tau\n"));
        assert_eq!(from_csv::<HittingRow>(&bytes).unwrap(), rows);
    }

    #[test]
    fn header_only_for_empty_tables() {
        let bytes = to_csv::<RateRow>(&[]).unwrap();
        assert_eq!(String::from_utf8(bytes.clone()).unwrap().lines().count(), 2);
        assert!(from_csv::<RateRow>(&bytes).unwrap().is_empty());
    }

    #[test]
    fn optional_columns_round_trip() {
        let row = EnsembleRow {
            cell: 1,
            m: 4,
            alpha: 0.5,
            schedule: "rate_law".into(),
            n: 100,
            seeds: 2,
            mean_grad_norm_sq: 1e-3,
            stderr_grad_norm_sq: 1e-4,
            tams: 2e-3,
            tams_interp_err: 0.0,
            mean_loss: 0.25,
            stderr_loss: 0.01,
            mean_consensus: 1e-7,
            stderr_consensus: 1e-8,
            mean_u_v_norm: 0.1,
            mean_z_subopt: None,
            stderr_z_subopt: Some(0.5),
        };
        let bytes = to_csv(std::slice::from_ref(&row)).unwrap();
        assert_eq!(from_csv::<EnsembleRow>(&bytes).unwrap(), vec![row]);
    }

    #[test]
    fn unknown_versions_and_tables_rejected() {
        let bytes = to_csv(&[hit()]).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let v2 = text.replacen("schema=1", "schema=2", 1);
        assert!(matches!(
            from_csv::<HittingRow>(v2.as_bytes()),
            Err(TableError::UnknownVersion { .. })
        ));
        assert!(matches!(
            from_csv::<RateRow>(text.as_bytes()),
            Err(TableError::WrongTable { .. })
        ));
        let bare = text.lines().skip(1).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            from_csv::<HittingRow>(bare.as_bytes()),
            Err(TableError::MissingHeader(_))
        ));
    }
}
