use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial_basis::SiteSet;

/// Scale on which the values of a [`Field`] are expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Raw,
    Uniform,
    Frechet,
}

/// `n_t` spatial replicates observed at `n_s` sites, stored row-major as
/// `values[t * n_s + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    values: Vec<f64>,
    n_t: usize,
    sites: SiteSet,
    scale: Scale,
}

impl Field {
    pub fn new(values: Vec<f64>, n_t: usize, sites: SiteSet, scale: Scale) -> Result<Self> {
        let n_s = sites.len();
        if values.len() != n_t * n_s {
            return Err(Error::shape(format!(
                "field has {} values, expected {n_t} x {n_s}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "non-finite value at replicate {}, site {}",
                pos / n_s.max(1),
                pos % n_s.max(1)
            )));
        }
        if scale == Scale::Uniform && values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain("uniform-scale values must lie in [0, 1]"));
        }
        Ok(Self {
            values,
            n_t,
            sites,
            scale,
        })
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn n_s(&self) -> usize {
        self.sites.len()
    }

    pub fn sites(&self) -> &SiteSet {
        &self.sites
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.values[t * self.n_s() + j]
    }

    pub fn replicate(&self, t: usize) -> &[f64] {
        let n_s = self.n_s();
        &self.values[t * n_s..(t + 1) * n_s]
    }

    pub fn replicates(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_s().max(1)).take(self.n_t)
    }

    /// Time series at site `j`.
    pub fn site_series(&self, j: usize) -> Vec<f64> {
        (0..self.n_t).map(|t| self.get(t, j)).collect()
    }

    /// Restriction of the field to the listed sites, in the listed order.
    pub fn select_sites(&self, indices: &[usize]) -> Result<Field> {
        let sites = self.sites.subset(indices)?;
        let mut values = Vec::with_capacity(self.n_t * indices.len());
        for t in 0..self.n_t {
            let row = self.replicate(t);
            values.extend(indices.iter().map(|&j| row[j]));
        }
        Field::new(values, self.n_t, sites, self.scale)
    }

    pub fn with_values(&self, values: Vec<f64>, scale: Scale) -> Result<Field> {
        Field::new(values, self.n_t, self.sites.clone(), scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sites3() -> SiteSet {
        SiteSet::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap()
    }

    #[test]
    fn rejects_wrong_length_and_non_finite() {
        assert!(Field::new(vec![1.0; 5], 2, sites3(), Scale::Raw).is_err());
        let mut v = vec![1.0; 6];
        v[4] = f64::NAN;
        assert!(Field::new(v, 2, sites3(), Scale::Raw).is_err());
        assert!(Field::new(vec![1.5; 6], 2, sites3(), Scale::Uniform).is_err());
    }

    #[test]
    fn selection_keeps_order() {
        let f = Field::new((0..6).map(f64::from).collect(), 2, sites3(), Scale::Raw).unwrap();
        let g = f.select_sites(&[2, 0]).unwrap();
        assert_eq!(g.values(), &[2.0, 0.0, 5.0, 3.0]);
        assert_eq!(f.site_series(1), vec![1.0, 4.0]);
    }
}
