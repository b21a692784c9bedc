use super::Network;
use crate::error::{Error, Result};

/// Exponential moving average of a network's parameters.
///
/// The shadow keeps its own batch-norm running statistics, updated by its
/// own forward passes.
#[derive(Clone, Debug)]
pub struct EmaNetwork {
    shadow: Network,
    decay: f64,
}

impl EmaNetwork {
    pub fn new(source: &Network, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay must be in [0, 1], got {decay}")));
        }
        Ok(Self {
            shadow: source.clone(),
            decay,
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &Network {
        &self.shadow
    }

    pub fn shadow_mut(&mut self) -> &mut Network {
        &mut self.shadow
    }

    /// `shadow <- decay * shadow + (1 - decay) * source`, per parameter.
    pub fn update(&mut self, source: &Network) -> Result<()> {
        let src = source.params();
        let dst = self.shadow.params_mut();
        if src.len() != dst.len() {
            return Err(Error::Structure(format!(
                "EMA source has {} parameters, shadow has {}",
                src.len(),
                dst.len()
            )));
        }
        for ((sn, st), (dn, dt)) in src.iter().zip(dst.iter()) {
            if sn != dn || st.shape() != dt.shape() {
                return Err(Error::Structure(format!(
                    "EMA topology mismatch at `{sn}` {:?} vs `{dn}` {:?}",
                    st.shape(),
                    dt.shape()
                )));
            }
        }
        let d = self.decay;
        for (name, t) in dst.iter_mut() {
            let s = &src[name];
            for (w, v) in t.data_mut().iter_mut().zip(s.data()) {
                *w = (d * f64::from(*w) + (1.0 - d) * f64::from(*v)) as f32;
            }
        }
        Ok(())
    }
}
