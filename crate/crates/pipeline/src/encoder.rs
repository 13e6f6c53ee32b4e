use std::path::Path;

use mmrec_core::scl::{encode, EncoderState};
use mmrec_core::Embeddings;
use mmrec_tensor::{checkpoint, ParamSet};

use crate::error::{PipelineError, Result};

/// Maps raw modal features to representations.
pub trait Encoder: Send + Sync {
    fn input_dim(&self) -> usize;

    /// Encodes a batch. An `Err` fails the whole batch; the worker then
    /// retries rows one at a time to find the bad ones.
    fn encode(&self, rows: &[&[f32]]) -> std::result::Result<Vec<Vec<f32>>, String>;
}

/// The pretrained query encoder.
pub struct SclEncoder {
    params: ParamSet,
    input_dim: usize,
}

impl SclEncoder {
    pub fn new(params: &ParamSet) -> Result<Self> {
        let state = EncoderState::from_params(params, 0.0)?;
        let input_dim = state.query.get("enc.l0.w")?.shape()[0];
        Ok(Self {
            params: state.query,
            input_dim,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (params, _) = checkpoint::load(path)?;
        Self::new(&params)
    }
}

impl Encoder for SclEncoder {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn encode(&self, rows: &[&[f32]]) -> std::result::Result<Vec<Vec<f32>>, String> {
        let mut data = Vec::with_capacity(rows.len() * self.input_dim);
        for r in rows {
            data.extend_from_slice(r);
        }
        let x = Embeddings::new(self.input_dim, data).map_err(|e| e.to_string())?;
        let y = encode(&self.params, &x).map_err(|e| e.to_string())?;
        Ok(y.iter().map(<[f32]>::to_vec).collect())
    }
}

/// Per-row closure encoder, mostly for tests and demos.
pub struct FnEncoder<F> {
    input_dim: usize,
    f: F,
}

impl<F> FnEncoder<F>
where
    F: Fn(&[f32]) -> std::result::Result<Vec<f32>, String> + Send + Sync,
{
    pub fn new(input_dim: usize, f: F) -> Self {
        Self { input_dim, f }
    }
}

impl<F> Encoder for FnEncoder<F>
where
    F: Fn(&[f32]) -> std::result::Result<Vec<f32>, String> + Send + Sync,
{
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn encode(&self, rows: &[&[f32]]) -> std::result::Result<Vec<Vec<f32>>, String> {
        rows.iter().map(|r| (self.f)(r)).collect()
    }
}

pub(crate) fn check_dim(encoder: &dyn Encoder, got: usize) -> Result<()> {
    let expected = encoder.input_dim();
    if expected != got {
        return Err(PipelineError::Dim { expected, got });
    }
    Ok(())
}

/// Encodes `rows`, isolating failures to the rows that cause them. Outputs
/// that are not finite count as failures.
pub(crate) fn encode_each(
    encoder: &dyn Encoder,
    rows: &[&[f32]],
) -> Vec<std::result::Result<Vec<f32>, String>> {
    let check = |v: Vec<f32>| {
        if v.iter().all(|x| x.is_finite()) {
            Ok(v)
        } else {
            Err("non-finite representation".to_string())
        }
    };
    match encoder.encode(rows) {
        Ok(out) if out.len() == rows.len() => out.into_iter().map(check).collect(),
        _ if rows.len() > 1 => rows
            .iter()
            .map(|r| match encoder.encode(std::slice::from_ref(r)) {
                Ok(mut v) if v.len() == 1 => check(v.pop().expect("one row")),
                Ok(_) => Err("encoder returned wrong row count".to_string()),
                Err(e) => Err(e),
            })
            .collect(),
        Ok(_) => vec![Err("encoder returned wrong row count".to_string())],
        Err(e) => vec![Err(e)],
    }
}
