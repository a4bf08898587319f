use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::ScoreMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// `s = x W + b`
    Linear,
    /// `s = tanh(x W1 + b1) W2 + b2`
    Mlp1,
}

impl ModelKind {
    fn tag(self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Mlp1 => "mlp1",
        }
    }
}

/// Per-pixel classifier; all parameters live in one flat buffer.
///
/// Layout: linear `[W (d x c), b (c)]`; mlp1 `[W1 (d x h), b1 (h), W2 (h x c), b2 (c)]`,
/// matrices row-major with the input dimension first.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    kind: ModelKind,
    inputs: usize,
    hidden: usize,
    classes: usize,
    params: Vec<f64>,
}

fn param_count(kind: ModelKind, d: usize, h: usize, c: usize) -> usize {
    match kind {
        ModelKind::Linear => d * c + c,
        ModelKind::Mlp1 => d * h + h + h * c + c,
    }
}

impl Model {
    pub fn zeros(kind: ModelKind, inputs: usize, hidden: usize, classes: usize) -> Result<Self> {
        if inputs == 0 || classes < 2 || (kind == ModelKind::Mlp1 && hidden == 0) {
            return Err(Error::InvalidDimensions(format!(
                "model needs d > 0, c >= 2 and h > 0 for mlp1 (d={inputs}, h={hidden}, c={classes})"
            )));
        }
        let hidden = if kind == ModelKind::Linear { 0 } else { hidden };
        Ok(Self { kind, inputs, hidden, classes, params: vec![0.0; param_count(kind, inputs, hidden, classes)] })
    }

    /// Every layer drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases included.
    pub fn init(kind: ModelKind, inputs: usize, hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(kind, inputs, hidden, classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<(usize, usize)> = match kind {
            // (parameter count, fan in)
            ModelKind::Linear => vec![(inputs * classes + classes, inputs)],
            ModelKind::Mlp1 => {
                let h = model.hidden;
                vec![(inputs * h + h, inputs), (h * classes + classes, h)]
            }
        };
        let mut offset = 0;
        for (count, fan_in) in layers {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut model.params[offset..offset + count] {
                *p = rng.random_range(-bound..bound);
            }
            offset += count;
        }
        Ok(model)
    }

    pub fn from_params(kind: ModelKind, inputs: usize, hidden: usize, classes: usize, params: Vec<f64>) -> Result<Self> {
        let mut model = Self::zeros(kind, inputs, hidden, classes)?;
        if params.len() != model.params.len() {
            return Err(Error::InvalidDimensions(format!(
                "expected {} parameters, got {}",
                model.params.len(),
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        model.params = params;
        Ok(model)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    /// `(d, h, c)`; `h` is 0 for linear models.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.inputs, self.hidden, self.classes)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_features(&self, features: &[f64]) -> Result<usize> {
        if features.len() % self.inputs != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values do not split into {}-dim pixels",
                features.len(),
                self.inputs
            )));
        }
        Ok(features.len() / self.inputs)
    }

    /// `out[n x cols] = x[n x rows] W[rows x cols] + b`
    fn affine(x: &[f64], rows: usize, w: &[f64], b: &[f64], out: &mut Vec<f64>) {
        let cols = b.len();
        for xi in x.chunks_exact(rows) {
            let start = out.len();
            out.extend_from_slice(b);
            let o = &mut out[start..];
            for (&xv, wr) in xi.iter().zip(w.chunks_exact(cols)) {
                for (ov, wv) in o.iter_mut().zip(wr) {
                    *ov += xv * wv;
                }
            }
        }
    }

    fn hidden_activations(&self, features: &[f64]) -> Vec<f64> {
        let (d, h) = (self.inputs, self.hidden);
        let mut a = Vec::with_capacity(features.len() / d * h);
        Self::affine(features, d, &self.params[..d * h], &self.params[d * h..d * h + h], &mut a);
        a.iter_mut().for_each(|v| *v = v.tanh());
        a
    }

    /// Scores for a flat `pixels x d` feature buffer, as a single-row map.
    pub fn forward(&self, features: &[f64]) -> Result<ScoreMap> {
        let n = self.check_features(features)?;
        let (d, h, c) = (self.inputs, self.hidden, self.classes);
        let mut out = Vec::with_capacity(n * c);
        match self.kind {
            ModelKind::Linear => Self::affine(features, d, &self.params[..d * c], &self.params[d * c..], &mut out),
            ModelKind::Mlp1 => {
                let a = self.hidden_activations(features);
                let off = d * h + h;
                Self::affine(&a, h, &self.params[off..off + h * c], &self.params[off + h * c..], &mut out);
            }
        }
        ScoreMap::new(1, n, c, out)
    }

    /// Chain rule from `d loss / d scores` to `d loss / d params`.
    pub fn backward(&self, features: &[f64], dscores: &[f64]) -> Result<Vec<f64>> {
        let n = self.check_features(features)?;
        let (d, h, c) = (self.inputs, self.hidden, self.classes);
        if dscores.len() != n * c {
            return Err(Error::ShapeMismatch(format!("{} score gradients for {n} pixels x {c}", dscores.len())));
        }
        let mut grad = vec![0.0; self.params.len()];
        // Accumulates x^T g into a (rows x cols) block followed by a (cols) bias block.
        fn outer(x: &[f64], rows: usize, g: &[f64], cols: usize, dw: &mut [f64]) {
            let (dw, db) = dw.split_at_mut(rows * cols);
            for (xi, gi) in x.chunks_exact(rows).zip(g.chunks_exact(cols)) {
                for (&xv, wr) in xi.iter().zip(dw.chunks_exact_mut(cols)) {
                    for (w, &gv) in wr.iter_mut().zip(gi) {
                        *w += xv * gv;
                    }
                }
                for (b, &gv) in db.iter_mut().zip(gi) {
                    *b += gv;
                }
            }
        }
        match self.kind {
            ModelKind::Linear => outer(features, d, dscores, c, &mut grad),
            ModelKind::Mlp1 => {
                let a = self.hidden_activations(features);
                let off = d * h + h;
                let w2 = &self.params[off..off + h * c];
                outer(&a, h, dscores, c, &mut grad[off..]);
                let mut dz = vec![0.0; n * h];
                for ((dzi, gi), ai) in dz.chunks_exact_mut(h).zip(dscores.chunks_exact(c)).zip(a.chunks_exact(h)) {
                    for (j, dzj) in dzi.iter_mut().enumerate() {
                        let back: f64 = gi.iter().zip(&w2[j * c..(j + 1) * c]).map(|(g, w)| g * w).sum();
                        *dzj = back * (1.0 - ai[j] * ai[j]);
                    }
                }
                outer(features, d, &dz, h, &mut grad[..off]);
            }
        }
        Ok(grad)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("MDL1 {} {} {} {}\n", self.kind.tag(), self.inputs, self.hidden, self.classes).into_bytes();
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let end = bytes
            .iter()
            .take(128)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedHeader("checkpoint has no header line".into()))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::MalformedHeader("non-ASCII header".into()))?;
        let f: Vec<&str> = header.split(' ').collect();
        if f.len() != 5 || f[0] != "MDL1" {
            return Err(Error::MalformedHeader(format!("bad checkpoint header {header:?}")));
        }
        let kind = match f[1] {
            "linear" => ModelKind::Linear,
            "mlp1" => ModelKind::Mlp1,
            other => return Err(Error::MalformedHeader(format!("unknown model kind {other:?}"))),
        };
        let dim = |s: &str| s.parse::<usize>().map_err(|_| Error::MalformedHeader(format!("bad dimension {s:?}")));
        let (d, h, c) = (dim(f[2])?, dim(f[3])?, dim(f[4])?);
        let payload = &bytes[end + 1..];
        let expected = param_count(kind, d, h, c) * 8;
        if payload.len() != expected {
            return Err(Error::Truncated { expected, found: payload.len() });
        }
        let params = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        Self::from_params(kind, d, h, c, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{ce_loss, Loss, LossOp};
    use crate::raster::LabelMask;

    #[test]
    fn zero_model_scores_zero() {
        let m = Model::zeros(ModelKind::Linear, 4, 0, 3).unwrap();
        let s = m.forward(&[1.0, -2.0, 3.0, 0.5, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(s.data().iter().all(|v| *v == 0.0));
        assert_eq!(s.pixels(), 2);
    }

    #[test]
    fn basis_probe_reads_weight_row() {
        let params: Vec<f64> = (0..3 * 2 + 2).map(|i| i as f64 * 0.5).collect();
        let m = Model::from_params(ModelKind::Linear, 3, 0, 2, params.clone()).unwrap();
        for j in 0..3 {
            let mut x = vec![0.0; 3];
            x[j] = 1.0;
            let s = m.forward(&x).unwrap();
            assert_eq!(s.data(), &[params[j * 2] + params[6], params[j * 2 + 1] + params[7]]);
        }
    }

    #[test]
    fn mlp_forward_matches_scalar_reimplementation() {
        let (d, h, c) = (3, 4, 2);
        let m = Model::init(ModelKind::Mlp1, d, h, c, 17).unwrap();
        let x = [0.3, -1.2, 0.7, 1.5, 0.0, -0.4, -0.9, 2.2, 0.1];
        let p = m.params();
        let (w1, b1) = (&p[..d * h], &p[d * h..d * h + h]);
        let (w2, b2) = (&p[d * h + h..d * h + h + h * c], &p[d * h + h + h * c..]);
        let got = m.forward(&x).unwrap();
        for i in 0..3 {
            for k in 0..c {
                let mut s = b2[k];
                for j in 0..h {
                    let mut z = b1[j];
                    for r in 0..d {
                        z += x[i * d + r] * w1[r * h + j];
                    }
                    s += z.tanh() * w2[j * c + k];
                }
                assert!((got.pixel(i)[k] - s).abs() < 1e-12);
            }
        }
    }

    fn param_fd(m: &Model, x: &[f64], gt: &LabelMask, loss: &LossOp) -> Vec<f64> {
        let mut probe = m.clone();
        let h = 1e-5;
        (0..m.params().len())
            .map(|i| {
                let v = m.params()[i];
                probe.params_mut()[i] = v + h;
                let hi = loss.evaluate(&probe.forward(x).unwrap(), gt).unwrap().value;
                probe.params_mut()[i] = v - h;
                let lo = loss.evaluate(&probe.forward(x).unwrap(), gt).unwrap().value;
                probe.params_mut()[i] = v;
                (hi - lo) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let loss = LossOp::CrossEntropy { class_weights: None };
        for (kind, seed) in [(ModelKind::Linear, 1), (ModelKind::Mlp1, 2), (ModelKind::Mlp1, 3)] {
            let m = Model::init(kind, 4, 5, 3, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let x: Vec<f64> = (0..6 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let gt = LabelMask::from_labels(3, (0..6).map(|i| (i % 3) as u8).collect()).unwrap();
            let res = loss.evaluate(&m.forward(&x).unwrap(), &gt).unwrap();
            let analytic = m.backward(&x, &res.gradient).unwrap();
            let numeric = param_fd(&m, &x, &gt, &loss);
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!((a - n).abs() <= 1e-5 * a.abs().max(n.abs()).max(1e-4), "{kind:?}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn backward_linearity() {
        let m = Model::init(ModelKind::Mlp1, 2, 3, 2, 9).unwrap();
        assert!(m.backward(&[0.5, -0.5], &[0.0, 0.0]).unwrap().iter().all(|g| *g == 0.0));
        let x = [0.5, -0.5, 1.0, 2.0];
        let gt = LabelMask::from_labels(2, vec![1, 0]).unwrap();
        let single = ce_loss(&m.forward(&x[..2]).unwrap(), &LabelMask::from_labels(2, vec![1]).unwrap(), None).unwrap();
        let g1 = m.backward(&x[..2], &single.gradient).unwrap();
        // Appending a copy of the pixel with an unscaled gradient doubles its contribution.
        let twice = [x[0], x[1], x[0], x[1]];
        let gg: Vec<f64> = single.gradient.iter().chain(&single.gradient).copied().collect();
        let g2 = m.backward(&twice, &gg).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() < 1e-14);
        }
        let _ = gt;
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::init(ModelKind::Mlp1, 3, 4, 2, 5).unwrap();
        let bytes = m.to_bytes();
        assert!(bytes.starts_with(b"MDL1 mlp1 3 4 2\n"));
        assert_eq!(Model::from_bytes(&bytes).unwrap(), m);
        assert!(matches!(Model::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn init_respects_fan_in() {
        let m = Model::init(ModelKind::Linear, 16, 0, 3, 0).unwrap();
        assert!(m.params().iter().all(|p| p.abs() <= 0.25));
        assert_ne!(m, Model::init(ModelKind::Linear, 16, 0, 3, 1).unwrap());
        assert_eq!(m, Model::init(ModelKind::Linear, 16, 0, 3, 0).unwrap());
    }
}
