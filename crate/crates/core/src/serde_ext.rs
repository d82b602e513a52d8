//! Serde adapters that write non-finite reals as JSON `null` and read
//! `null` back as `+∞`.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

fn wrap(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn unwrap(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::INFINITY)
}

pub mod nullable_f64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        wrap(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Option::<f64>::deserialize(d).map(unwrap)
    }
}

pub mod nullable_matrix {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<Option<f64>>> = v.iter().map(|r| r.iter().copied().map(wrap).collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let rows = Vec::<Vec<Option<f64>>>::deserialize(d)?;
        Ok(rows.into_iter().map(|r| r.into_iter().map(unwrap).collect()).collect())
    }
}
