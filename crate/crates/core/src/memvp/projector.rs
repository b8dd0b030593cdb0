use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::count::{record, Component, MacCounter};
use crate::error::{Error, Result};
use crate::numkit::{Activation, Matrix};

/// Where a feature bundle came from: per-slot local features, or a single
/// pooled global vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Local,
    Global,
}

/// Raw visual features: n feature vectors of dimension d'. n = 0 marks a
/// text-only sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualFeatures {
    pub z: Matrix,
    pub source: FeatureSource,
}

impl VisualFeatures {
    pub fn local(z: Matrix) -> Self {
        VisualFeatures { z, source: FeatureSource::Local }
    }

    /// Mean-pool all feature rows into a single global vector (n = 1).
    pub fn to_global(&self) -> Result<VisualFeatures> {
        Ok(VisualFeatures {
            z: self.z.mean_rows()?,
            source: FeatureSource::Global,
        })
    }

    pub fn count(&self) -> usize {
        self.z.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    OneFc,
    TwoFc,
}

/// Feature-to-prompt projection f, shared between the key and value paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub kind: ProjectorKind,
    pub w_in: Matrix,
    pub b_in: Matrix,
    /// Second layer, present only for `TwoFc`.
    pub w_out: Option<Matrix>,
    pub b_out: Option<Matrix>,
    /// Non-linearity between the two FC layers.
    pub activation: Activation,
}

impl Projector {
    pub fn one_fc(w: Matrix, b: Matrix) -> Result<Self> {
        if b.rows() != 1 || b.cols() != w.cols() {
            return Err(Error::shape("projector bias must be 1 x d"));
        }
        Ok(Projector {
            kind: ProjectorKind::OneFc,
            w_in: w,
            b_in: b,
            w_out: None,
            b_out: None,
            activation: Activation::Gelu,
        })
    }

    pub fn two_fc(
        w_in: Matrix,
        b_in: Matrix,
        w_out: Matrix,
        b_out: Matrix,
        activation: Activation,
    ) -> Result<Self> {
        if b_in.rows() != 1 || b_in.cols() != w_in.cols() {
            return Err(Error::shape("projector hidden bias must be 1 x h"));
        }
        if w_out.rows() != w_in.cols() {
            return Err(Error::shape("projector layer dims do not chain"));
        }
        if b_out.rows() != 1 || b_out.cols() != w_out.cols() {
            return Err(Error::shape("projector output bias must be 1 x d"));
        }
        Ok(Projector {
            kind: ProjectorKind::TwoFc,
            w_in,
            b_in,
            w_out: Some(w_out),
            b_out: Some(b_out),
            activation,
        })
    }

    pub fn init_random<R: Rng>(
        kind: ProjectorKind,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        activation: Activation,
        std: f64,
        rng: &mut R,
    ) -> Self {
        match kind {
            ProjectorKind::OneFc => Projector {
                kind,
                w_in: Matrix::random_normal(d_in, d_out, std, rng),
                b_in: Matrix::zeros(1, d_out),
                w_out: None,
                b_out: None,
                activation,
            },
            ProjectorKind::TwoFc => Projector {
                kind,
                w_in: Matrix::random_normal(d_in, hidden, std, rng),
                b_in: Matrix::zeros(1, hidden),
                w_out: Some(Matrix::random_normal(hidden, d_out, std, rng)),
                b_out: Some(Matrix::zeros(1, d_out)),
                activation,
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.rows()
    }

    pub fn output_dim(&self) -> usize {
        match &self.w_out {
            Some(w) => w.cols(),
            None => self.w_in.cols(),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.w_in.rows() * self.w_in.cols() + self.b_in.cols();
        if let Some(w) = &self.w_out {
            n += w.rows() * w.cols();
        }
        if let Some(b) = &self.b_out {
            n += b.cols();
        }
        n
    }

    /// Row i of the result is f(z_i); the lambda scale is applied later,
    /// when the key/value entries are assembled.
    pub fn project(&self, features: &VisualFeatures, mut macs: Option<&mut MacCounter>) -> Result<Matrix> {
        let z = &features.z;
        if z.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "projector expects d'={}, features have {}",
                self.input_dim(),
                z.cols()
            )));
        }
        let mut h = add_bias(&z.matmul(&self.w_in)?, &self.b_in);
        record(&mut macs, Component::Projector, z.rows(), z.cols(), self.w_in.cols());
        if let (Some(w_out), Some(b_out)) = (&self.w_out, &self.b_out) {
            let activated = crate::numkit::activation(self.activation, &h)?;
            h = add_bias(&activated.matmul(w_out)?, b_out);
            record(&mut macs, Component::Projector, z.rows(), w_out.rows(), w_out.cols());
        }
        Ok(h)
    }

    pub fn visit(&self, f: &mut impl FnMut(&str, &Matrix)) {
        f("projector.w_in", &self.w_in);
        f("projector.b_in", &self.b_in);
        if let Some(w) = &self.w_out {
            f("projector.w_out", w);
        }
        if let Some(b) = &self.b_out {
            f("projector.b_out", b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Matrix)) {
        f("projector.w_in", &mut self.w_in);
        f("projector.b_in", &mut self.b_in);
        if let Some(w) = &mut self.w_out {
            f("projector.w_out", w);
        }
        if let Some(b) = &mut self.b_out {
            f("projector.b_out", b);
        }
    }
}

fn add_bias(x: &Matrix, b: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (o, &v) in out.row_mut(i).iter_mut().zip(b.row(0)) {
            *o += v;
        }
    }
    out
}
