//! The text tower (phrase encoder with mode switching) and the image tower.

use rand_chacha::ChaCha8Rng;

use super::bundle::{ImageFeatures, TextFeatureBundle};
use super::graph::{Graph, Var};
use super::layers::{join_name, EncoderLayer, Linear, Mlp, Params};
use super::tensor::Matrix;
use super::ModelError;
use crate::config::Config;

#[derive(Debug, Clone, PartialEq)]
pub struct SpeWeights {
    /// Present only when the text feature width differs from the
    /// transformer width.
    pub input_proj: Option<Linear>,
    pub layers: Vec<EncoderLayer>,
    pub fusion: Mlp,
    pub dropout: f64,
    pub text_dim: usize,
}

impl SpeWeights {
    pub fn new(config: &Config) -> Self {
        let (d, h) = (config.text_feat_dim, config.transformer_hidden);
        let seed = config.seed;
        Self {
            input_proj: (d != h).then(|| Linear::new(seed, "spe.input_proj", d, h)),
            layers: (0..config.transformer_layers)
                .map(|i| {
                    EncoderLayer::new(
                        seed,
                        &format!("spe.layers.{i}"),
                        h,
                        config.attention_heads,
                        config.transformer_ffn(),
                    )
                })
                .collect(),
            fusion: Mlp::new(
                seed,
                "spe.fusion",
                3 * d + h,
                config.mlp_hidden,
                config.joint_dim,
            ),
            dropout: config.dropout,
            text_dim: d,
        }
    }

    pub fn joint_dim(&self) -> usize {
        self.fusion.out_dim()
    }

    fn check(&self, bundle: &TextFeatureBundle) -> Result<(), ModelError> {
        bundle.validate()?;
        if bundle.dim() != self.text_dim {
            return Err(ModelError::Config(format!(
                "bundle width {} does not match text tower width {}",
                bundle.dim(),
                self.text_dim
            )));
        }
        Ok(())
    }

    /// Records the forward pass of a batch; returns a `bundles.len() × joint_dim` node.
    /// Dropout is active exactly when `rng` is given.
    pub fn forward_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        bundles: &[&TextFeatureBundle],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        if bundles.is_empty() {
            return Err(ModelError::InvalidArgument("empty text batch".into()));
        }
        for b in bundles {
            self.check(b)?;
        }
        let d = self.text_dim;
        let seq_len = 1 + bundles.iter().map(|b| b.l_np.rows()).max().unwrap_or(0);
        let mut seq = Matrix::zeros(bundles.len() * seq_len, d);
        let mut valid = vec![false; bundles.len() * seq_len];
        let mut flat = Matrix::zeros(bundles.len(), 3 * d);
        for (i, b) in bundles.iter().enumerate() {
            let base = i * seq_len;
            seq.row_mut(base).copy_from_slice(&b.l_p);
            valid[base] = true;
            for (r, &m) in b.np_mask.iter().enumerate() {
                if m {
                    seq.row_mut(base + 1 + r).copy_from_slice(b.l_np.row(r));
                    valid[base + 1 + r] = true;
                }
            }
            let row = flat.row_mut(i);
            row[..d].copy_from_slice(&b.l_p);
            row[d..2 * d].copy_from_slice(&b.l_txt);
            row[2 * d..].copy_from_slice(&b.l_prime_txt);
        }

        let mut x = g.input(seq);
        if let Some(proj) = &self.input_proj {
            x = proj.forward(g, "spe.input_proj", x);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(
                g,
                &format!("spe.layers.{i}"),
                x,
                seq_len,
                &valid,
                self.dropout,
                rng.as_deref_mut(),
            );
        }
        let pooled = g.gather_rows(x, (0..bundles.len()).map(|i| i * seq_len).collect());
        let flat = g.input(flat);
        let fused = g.concat_cols(&[flat, pooled]);
        Ok(self
            .fusion
            .forward(g, "spe.fusion", fused, self.dropout, rng))
    }
}

impl Params for SpeWeights {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        if let Some(p) = &self.input_proj {
            p.visit(&join_name(prefix, "input_proj"), f);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join_name(prefix, &format!("layers.{i}")), f);
        }
        self.fusion.visit(&join_name(prefix, "fusion"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        if let Some(p) = &mut self.input_proj {
            p.visit_mut(&join_name(prefix, "input_proj"), f);
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join_name(prefix, &format!("layers.{i}")), f);
        }
        self.fusion.visit_mut(&join_name(prefix, "fusion"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SareWeights {
    pub fusion: Mlp,
    pub dropout: f64,
}

impl SareWeights {
    pub fn new(config: &Config) -> Self {
        Self {
            fusion: Mlp::new(
                config.seed,
                "sare.fusion",
                2 * config.image_feat_dim,
                config.mlp_hidden,
                config.joint_dim,
            ),
            dropout: config.dropout,
        }
    }

    pub fn image_dim(&self) -> usize {
        self.fusion.in_dim() / 2
    }

    pub fn joint_dim(&self) -> usize {
        self.fusion.out_dim()
    }

    pub fn forward_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        features: &[&ImageFeatures],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        if features.is_empty() {
            return Err(ModelError::InvalidArgument("empty image batch".into()));
        }
        let d = self.image_dim();
        let mut x = Matrix::zeros(features.len(), 2 * d);
        for (i, f) in features.iter().enumerate() {
            if f.v_img.len() != d || f.v_sar.len() != d {
                return Err(ModelError::Config(format!(
                    "image features are {}+{} wide, image tower expects {d}+{d}",
                    f.v_img.len(),
                    f.v_sar.len()
                )));
            }
            let row = x.row_mut(i);
            row[..d].copy_from_slice(&f.v_img);
            row[d..].copy_from_slice(&f.v_sar);
        }
        if !x.is_finite() {
            return Err(ModelError::Degenerate(
                "image features have non-finite entries".into(),
            ));
        }
        let x = g.input(x);
        Ok(self.fusion.forward(g, "sare.fusion", x, self.dropout, rng))
    }
}

impl Params for SareWeights {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.fusion.visit(&join_name(prefix, "fusion"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.fusion.visit_mut(&join_name(prefix, "fusion"), f);
    }
}

/// `h_txt` for one bundle. Dropout is active exactly when `rng` is given.
pub fn spe_forward(
    weights: &SpeWeights,
    bundle: &TextFeatureBundle,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<f64>, ModelError> {
    let mut g = Graph::new();
    let out = weights.forward_graph(&mut g, &[bundle], rng)?;
    Ok(g.value(out).row(0).to_vec())
}

/// `h_img = MLP([v_img; v_sar])`, without dropout.
pub fn sare_forward(
    weights: &SareWeights,
    v_img: &[f64],
    v_sar: &[f64],
) -> Result<Vec<f64>, ModelError> {
    let features = ImageFeatures {
        v_img: v_img.to_vec(),
        v_sar: v_sar.to_vec(),
    };
    let mut g = Graph::new();
    let out = weights.forward_graph(&mut g, &[&features], None)?;
    Ok(g.value(out).row(0).to_vec())
}

/// Cosine similarity. Zero vectors are rejected rather than scored.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64, ModelError> {
    if a.len() != b.len() {
        return Err(ModelError::Config(format!(
            "similarity of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (super::tensor::norm(a), super::tensor::norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(ModelError::Degenerate("similarity of a zero vector".into()));
    }
    Ok((super::tensor::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}
