//! Recorded posterior draws and their line-delimited JSON persistence.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::binary::BinaryMatrix;
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;

/// One kept state. `z` and `u` are flattened row-major (subject-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub iteration: usize,
    pub tau: f64,
    pub mu: f64,
    pub psi: Vec<f64>,
    pub z: Vec<u8>,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<Vec<f64>>,
}

/// All kept draws of one chain plus a few run statistics.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub n_subjects: usize,
    pub n_factors: usize,
    /// Kernel family; per-draw parameters live in `Draw::psi`.
    pub kernel: KernelSpec,
    pub draws: Vec<Draw>,
    pub psi_acceptance: f64,
}

impl ChainOutput {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn z(&self, d: usize) -> BinaryMatrix {
        BinaryMatrix::from_flat(self.n_subjects, self.n_factors, &self.draws[d].z)
            .expect("draw has n*K binary entries")
    }

    pub fn u(&self, d: usize) -> Option<DMatrix<f64>> {
        self.draws[d]
            .u
            .as_ref()
            .map(|u| DMatrix::from_row_slice(self.n_subjects, self.n_factors, u))
    }

    pub fn has_u(&self) -> bool {
        !self.draws.is_empty() && self.draws.iter().all(|d| d.u.is_some())
    }

    pub fn kernel_at(&self, d: usize) -> Result<KernelSpec> {
        self.kernel.with_params(&self.draws[d].psi)
    }

    /// Posterior P(z_ik = 1 | data) as the across-draw mean of z_ik.
    pub fn presence(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.n_subjects, self.n_factors);
        if self.draws.is_empty() {
            return p;
        }
        for d in &self.draws {
            for (idx, &v) in d.z.iter().enumerate() {
                if v != 0 {
                    p[(idx / self.n_factors, idx % self.n_factors)] += 1.0;
                }
            }
        }
        p / self.draws.len() as f64
    }

    /// Pools several chains of the same model.
    pub fn merge(chains: Vec<ChainOutput>) -> Result<ChainOutput> {
        let mut iter = chains.into_iter();
        let mut first = iter.next().ok_or_else(|| Error::invalid("no chains to merge"))?;
        let mut weight = first.draws.len() as f64;
        let mut acc = first.psi_acceptance * weight;
        for c in iter {
            if c.n_subjects != first.n_subjects || c.n_factors != first.n_factors {
                return Err(Error::Shape("chains disagree on n or K".into()));
            }
            acc += c.psi_acceptance * c.draws.len() as f64;
            weight += c.draws.len() as f64;
            first.draws.extend(c.draws);
        }
        first.psi_acceptance = if weight > 0.0 { acc / weight } else { 0.0 };
        Ok(first)
    }

    pub fn write_draws<W: Write>(&self, mut out: W) -> Result<()> {
        for d in &self.draws {
            serde_json::to_writer(&mut out, d)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_draws<R: BufRead>(
        input: R,
        n_subjects: usize,
        n_factors: usize,
        kernel: KernelSpec,
    ) -> Result<ChainOutput> {
        let mut draws = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let d: Draw = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: "<draws>".into(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
            if d.z.len() != n_subjects * n_factors {
                return Err(Error::Parse {
                    path: "<draws>".into(),
                    line: lineno + 1,
                    message: format!("expected {} z entries, found {}", n_subjects * n_factors, d.z.len()),
                });
            }
            draws.push(d);
        }
        Ok(ChainOutput { n_subjects, n_factors, kernel, draws, psi_acceptance: f64::NAN })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_output() -> ChainOutput {
        ChainOutput {
            n_subjects: 2,
            n_factors: 2,
            kernel: KernelSpec::exponential(0.5).unwrap(),
            draws: vec![
                Draw { iteration: 3, tau: 1.5, mu: -0.25, psi: vec![0.4], z: vec![1, 0, 1, 1], theta: vec![0.1, 0.2], u: Some(vec![0.5, -0.5, 1.0, 2.0]) },
                Draw { iteration: 4, tau: 1.0, mu: 0.0, psi: vec![0.6], z: vec![0, 0, 1, 0], theta: vec![0.3, 0.4], u: Some(vec![0.0; 4]) },
            ],
            psi_acceptance: 0.3,
        }
    }

    #[test]
    fn presence_is_mean_of_draws() {
        let p = sample_output().presence();
        assert_eq!(p[(0, 0)], 0.5);
        assert_eq!(p[(0, 1)], 0.0);
        assert_eq!(p[(1, 0)], 1.0);
        assert_eq!(p[(1, 1)], 0.5);
    }

    #[test]
    fn jsonl_round_trip() {
        let out = sample_output();
        let mut buf = Vec::new();
        out.write_draws(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 2);
        let back = ChainOutput::read_draws(&buf[..], 2, 2, out.kernel).unwrap();
        assert_eq!(back.draws, out.draws);
        assert_eq!(back.u(0).unwrap()[(1, 1)], 2.0);
        assert_eq!(back.kernel_at(1).unwrap().params(), vec![0.6]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"iteration\":0,\"tau\":1,\"mu\":0,\"psi\":[],\"z\":[0],\"theta\":[]}\nnot json\n";
        match ChainOutput::read_draws(text.as_bytes(), 1, 1, KernelSpec::Exchangeable) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
