//! The detector model: convolutional encoder, projection heads, linear
//! classifier, and checkpoint persistence.
//!
//! Architecture: the encoder is a stack of stride-2 3×3 conv+ReLU blocks
//! followed by global mean pooling. Three two-layer MLP projection heads
//! hang off the embedding — `f_hom` and `f_het` shape stage-1 training,
//! `f_aux` is the stage-2 auxiliary contrastive head — and their outputs
//! are always L2-normalized so contrastive dot products live on the unit
//! sphere. The classifier is an affine map from the embedding to one logit
//! (fake = 1). The classifier reads the embedding `e`, not a projection.
//!
//! Weights use He-uniform initialization (`±√(6/fan_in)`), biases start at
//! zero, and every draw comes from a named [`Rng`] substream, so bundles
//! are bitwise reproducible from a seed.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Encoder hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Input image side length in pixels.
    pub input_size: usize,
    /// Output channels of each stride-2 block.
    pub channels: Vec<usize>,
    /// Embedding width; must equal the last channel count.
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: 32,
            channels: vec![16, 32, 64, 128],
            embed_dim: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Argument("encoder needs at least one block".to_string()));
        }
        let down = 1usize << self.channels.len();
        if self.input_size == 0 || self.input_size % down != 0 {
            return Err(Error::Argument(format!(
                "input size {} must be a positive multiple of 2^{} = {down}",
                self.input_size,
                self.channels.len()
            )));
        }
        if self.embed_dim != *self.channels.last().unwrap() {
            return Err(Error::Argument(format!(
                "embed dim {} must equal the last channel count {}",
                self.embed_dim,
                self.channels.last().unwrap()
            )));
        }
        Ok(())
    }
}

/// Full model hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Output width of every projection head.
    pub proj_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            proj_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.proj_dim == 0 {
            return Err(Error::Argument("projection dim must be positive".to_string()));
        }
        Ok(())
    }
}

/// One stride-2 conv block's parameters.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub w: Tensor,
    pub b: Tensor,
}

/// Two affine layers with a ReLU between; output rows are L2-normalized by
/// the forward pass.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Affine embedding→1 classifier.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub w: Tensor,
    pub b: Tensor,
}

/// Which components the optimizer may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrozenFlags {
    pub encoder: bool,
    pub f_hom: bool,
    pub f_het: bool,
    pub f_aux: bool,
    pub classifier: bool,
}

impl FrozenFlags {
    /// Stage 1: encoder and both decoupling heads train.
    pub fn stage1() -> FrozenFlags {
        FrozenFlags {
            encoder: false,
            f_hom: false,
            f_het: false,
            f_aux: false,
            classifier: false,
        }
    }

    /// Stage 2: the backbone is frozen; only the auxiliary head and the
    /// classifier train.
    pub fn stage2() -> FrozenFlags {
        FrozenFlags {
            encoder: true,
            f_hom: true,
            f_het: true,
            f_aux: false,
            classifier: false,
        }
    }
}

/// All parameters plus their freeze state.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub encoder: Vec<ConvBlock>,
    pub f_hom: ProjectionHead,
    pub f_het: ProjectionHead,
    pub f_aux: ProjectionHead,
    pub classifier: Classifier,
    pub frozen: FrozenFlags,
}

/// He-uniform tensor: `U(−√(6/fan_in), +√(6/fan_in))`.
fn he_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.range_f64(-limit, limit)).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

fn new_head(rng: &Rng, embed: usize, out: usize, sub: u64) -> ProjectionHead {
    let mut r1 = rng.substream(sub);
    let mut r2 = rng.substream(sub + 1);
    ProjectionHead {
        w1: he_uniform(&mut r1, &[embed, embed], embed),
        b1: Tensor::zeros(&[embed]),
        w2: he_uniform(&mut r2, &[embed, out], embed),
        b2: Tensor::zeros(&[out]),
    }
}

impl ModelBundle {
    /// Fresh bundle with He-uniform weights and zero biases, entirely
    /// determined by `rng`'s seed. Starts with stage-1 freeze flags.
    pub fn new(config: &ModelConfig, rng: &Rng) -> Result<ModelBundle> {
        config.validate()?;
        let embed = config.encoder.embed_dim;

        let mut encoder = Vec::new();
        let mut in_ch = 3;
        for (i, &out_ch) in config.encoder.channels.iter().enumerate() {
            let mut r = rng.substream(10 + i as u64);
            encoder.push(ConvBlock {
                w: he_uniform(&mut r, &[out_ch, in_ch, 3, 3], in_ch * 9),
                b: Tensor::zeros(&[out_ch]),
            });
            in_ch = out_ch;
        }

        let f_hom = new_head(rng, embed, config.proj_dim, 30);
        let f_het = new_head(rng, embed, config.proj_dim, 40);
        let f_aux = new_head(rng, embed, config.proj_dim, 50);

        let mut rc = rng.substream(60);
        let classifier = Classifier {
            w: he_uniform(&mut rc, &[embed, 1], embed),
            b: Tensor::zeros(&[1]),
        };

        Ok(ModelBundle {
            config: config.clone(),
            encoder,
            f_hom,
            f_het,
            f_aux,
            classifier,
            frozen: FrozenFlags::stage1(),
        })
    }

    /// Named views of every parameter, in the crate's canonical order. The
    /// bool is `true` when the component is currently trainable.
    pub fn named_params(&self) -> Vec<(String, &Tensor, bool)> {
        let mut out = Vec::new();
        for (i, blk) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.block{i}.w"), &blk.w, !self.frozen.encoder));
            out.push((format!("encoder.block{i}.b"), &blk.b, !self.frozen.encoder));
        }
        for (name, head, frozen) in [
            ("f_hom", &self.f_hom, self.frozen.f_hom),
            ("f_het", &self.f_het, self.frozen.f_het),
            ("f_aux", &self.f_aux, self.frozen.f_aux),
        ] {
            out.push((format!("{name}.w1"), &head.w1, !frozen));
            out.push((format!("{name}.b1"), &head.b1, !frozen));
            out.push((format!("{name}.w2"), &head.w2, !frozen));
            out.push((format!("{name}.b2"), &head.b2, !frozen));
        }
        out.push(("classifier.w".to_string(), &self.classifier.w, !self.frozen.classifier));
        out.push(("classifier.b".to_string(), &self.classifier.b, !self.frozen.classifier));
        out
    }

    /// Mutable counterpart of [`ModelBundle::named_params`], same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor, bool)> {
        let frozen = self.frozen;
        let mut out: Vec<(String, &mut Tensor, bool)> = Vec::new();
        for (i, blk) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.block{i}.w"), &mut blk.w, !frozen.encoder));
            out.push((format!("encoder.block{i}.b"), &mut blk.b, !frozen.encoder));
        }
        for (name, head, fz) in [
            ("f_hom", &mut self.f_hom, frozen.f_hom),
            ("f_het", &mut self.f_het, frozen.f_het),
            ("f_aux", &mut self.f_aux, frozen.f_aux),
        ] {
            out.push((format!("{name}.w1"), &mut head.w1, !fz));
            out.push((format!("{name}.b1"), &mut head.b1, !fz));
            out.push((format!("{name}.w2"), &mut head.w2, !fz));
            out.push((format!("{name}.b2"), &mut head.b2, !fz));
        }
        out.push(("classifier.w".to_string(), &mut self.classifier.w, !frozen.classifier));
        out.push(("classifier.b".to_string(), &mut self.classifier.b, !frozen.classifier));
        out
    }

    /// Register every parameter on a tape, honoring freeze flags. The
    /// returned handles drive the forward ops and map back to parameters
    /// via [`BundleVars::ordered`] (same order as `named_params`).
    pub fn register(&self, tape: &mut Tape) -> BundleVars {
        let mut reg = |t: &Tensor, trainable: bool| -> Var {
            tape.leaf(t.clone().with_requires_grad(trainable))
        };
        let enc: Vec<(Var, Var)> = self
            .encoder
            .iter()
            .map(|blk| {
                (
                    reg(&blk.w, !self.frozen.encoder),
                    reg(&blk.b, !self.frozen.encoder),
                )
            })
            .collect();
        let mut head = |h: &ProjectionHead, frozen: bool| -> HeadVars {
            HeadVars {
                w1: reg(&h.w1, !frozen),
                b1: reg(&h.b1, !frozen),
                w2: reg(&h.w2, !frozen),
                b2: reg(&h.b2, !frozen),
            }
        };
        let f_hom = head(&self.f_hom, self.frozen.f_hom);
        let f_het = head(&self.f_het, self.frozen.f_het);
        let f_aux = head(&self.f_aux, self.frozen.f_aux);
        let classifier = (
            reg(&self.classifier.w, !self.frozen.classifier),
            reg(&self.classifier.b, !self.frozen.classifier),
        );
        BundleVars {
            input_size: self.config.encoder.input_size,
            encoder: enc,
            f_hom,
            f_het,
            f_aux,
            classifier,
        }
    }
}

/// Tape handles for one registration of a [`ModelBundle`].
#[derive(Debug, Clone)]
pub struct BundleVars {
    input_size: usize,
    encoder: Vec<(Var, Var)>,
    f_hom: HeadVars,
    f_het: HeadVars,
    f_aux: HeadVars,
    classifier: (Var, Var),
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl BundleVars {
    /// Parameter handles in `named_params` order.
    pub fn ordered(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for &(w, b) in &self.encoder {
            v.push(w);
            v.push(b);
        }
        for h in [&self.f_hom, &self.f_het, &self.f_aux] {
            v.extend([h.w1, h.b1, h.w2, h.b2]);
        }
        v.push(self.classifier.0);
        v.push(self.classifier.1);
        v
    }

    /// Encoder forward: stride-2 conv blocks with ReLU, then global mean
    /// pooling to `[B, embed_dim]`.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let &[_, c, h, w] = shape.as_slice() else {
            return Err(Error::dim(
                "encode",
                format!("expected [B,3,S,S] input, got {shape:?}"),
            ));
        };
        if c != 3 || h != self.input_size || w != self.input_size {
            return Err(Error::dim(
                "encode",
                format!(
                    "expected [B,3,{0},{0}] input, got {shape:?}",
                    self.input_size
                ),
            ));
        }
        let mut cur = x;
        for &(wv, bv) in &self.encoder {
            cur = tape.conv2d(cur, wv, 2, 1)?;
            cur = tape.add_channel_bias(cur, bv)?;
            cur = tape.relu(cur)?;
        }
        tape.global_mean_pool(cur)
    }

    fn project(&self, tape: &mut Tape, h: &HeadVars, e: Var) -> Result<Var> {
        let a = tape.matmul(e, h.w1)?;
        let a = tape.add_row_bias(a, h.b1)?;
        let a = tape.relu(a)?;
        let z = tape.matmul(a, h.w2)?;
        let z = tape.add_row_bias(z, h.b2)?;
        tape.l2_normalize(z, 1e-12)
    }

    /// Homogeneous (trace) projection; unit-norm rows.
    pub fn project_hom(&self, tape: &mut Tape, e: Var) -> Result<Var> {
        let h = self.f_hom;
        self.project(tape, &h, e)
    }

    /// Heterogeneous (content) projection; unit-norm rows.
    pub fn project_het(&self, tape: &mut Tape, e: Var) -> Result<Var> {
        let h = self.f_het;
        self.project(tape, &h, e)
    }

    /// Stage-2 auxiliary projection; unit-norm rows.
    pub fn project_aux(&self, tape: &mut Tape, e: Var) -> Result<Var> {
        let h = self.f_aux;
        self.project(tape, &h, e)
    }

    /// Classifier logits `[B, 1]`; sigmoid(logit) is the fake probability.
    pub fn classify(&self, tape: &mut Tape, e: Var) -> Result<Var> {
        let l = tape.matmul(e, self.classifier.0)?;
        tape.add_row_bias(l, self.classifier.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_size: 16,
                channels: vec![8, 16],
                embed_dim: 16,
            },
            proj_dim: 12,
        }
    }

    fn random_images(rng: &mut Rng, b: usize, s: usize) -> Tensor {
        let data: Vec<f64> = (0..b * 3 * s * s).map(|_| rng.range_f64(0.0, 1.0)).collect();
        Tensor::from_vec(&[b, 3, s, s], data).unwrap()
    }

    #[test]
    fn config_invariants_are_enforced() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad_embed = ModelConfig {
            encoder: EncoderConfig {
                embed_dim: 64,
                ..EncoderConfig::default()
            },
            proj_dim: 128,
        };
        assert!(bad_embed.validate().is_err());
        let bad_size = ModelConfig {
            encoder: EncoderConfig {
                input_size: 24, // not divisible by 2^4
                ..EncoderConfig::default()
            },
            proj_dim: 128,
        };
        assert!(bad_size.validate().is_err());
    }

    #[test]
    fn encode_produces_embedding_rows() {
        let mut rng = Rng::new(1);
        let bundle = ModelBundle::new(&ModelConfig::default(), &Rng::new(7)).unwrap();
        let x = random_images(&mut rng, 4, 32);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars = bundle.register(&mut tape);
        let e = vars.encode(&mut tape, xv).unwrap();
        assert_eq!(tape.value(e).shape(), &[4, 128]);
    }

    #[test]
    fn encode_rejects_wrong_spatial_size() {
        let bundle = ModelBundle::new(&ModelConfig::default(), &Rng::new(7)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
        let vars = bundle.register(&mut tape);
        assert!(matches!(
            vars.encode(&mut tape, xv),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn identical_inputs_embed_identically_and_bitwise_stably() {
        let mut rng = Rng::new(2);
        let bundle = ModelBundle::new(&small_config(), &Rng::new(3)).unwrap();
        let one = random_images(&mut rng, 1, 16);
        let mut two_data = one.data().to_vec();
        two_data.extend_from_slice(one.data());
        let two = Tensor::from_vec(&[2, 3, 16, 16], two_data).unwrap();

        let run = || -> Vec<f64> {
            let mut tape = Tape::new();
            let xv = tape.constant(two.clone());
            let vars = bundle.register(&mut tape);
            let e = vars.encode(&mut tape, xv).unwrap();
            tape.value(e).data().to_vec()
        };
        let out = run();
        let (r0, r1) = out.split_at(16);
        assert!(r0.iter().zip(r1).all(|(a, b)| a.to_bits() == b.to_bits()));
        let again = run();
        assert!(out.iter().zip(&again).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn zero_input_with_zero_biases_embeds_to_zero() {
        let bundle = ModelBundle::new(&small_config(), &Rng::new(5)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::zeros(&[2, 3, 16, 16]));
        let vars = bundle.register(&mut tape);
        let e = vars.encode(&mut tape, xv).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projections_are_unit_norm_with_expected_shape() {
        let mut rng = Rng::new(6);
        let bundle = ModelBundle::new(&small_config(), &Rng::new(8)).unwrap();
        let x = random_images(&mut rng, 3, 16);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars = bundle.register(&mut tape);
        let e = vars.encode(&mut tape, xv).unwrap();
        for z in [
            vars.project_hom(&mut tape, e).unwrap(),
            vars.project_het(&mut tape, e).unwrap(),
            vars.project_aux(&mut tape, e).unwrap(),
        ] {
            let t = tape.value(z);
            assert_eq!(t.shape(), &[3, 12]);
            for r in 0..3 {
                let norm: f64 = t.data()[r * 12..(r + 1) * 12]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                assert!((norm - 1.0).abs() <= 1e-6, "row {r} norm {norm}");
            }
        }
    }

    #[test]
    fn default_config_projects_to_width_128() {
        let bundle = ModelBundle::new(&ModelConfig::default(), &Rng::new(9)).unwrap();
        let mut rng = Rng::new(10);
        let x = random_images(&mut rng, 2, 32);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars = bundle.register(&mut tape);
        let e = vars.encode(&mut tape, xv).unwrap();
        let z = vars.project_hom(&mut tape, e).unwrap();
        assert_eq!(tape.value(z).shape(), &[2, 128]);
    }

    #[test]
    fn classifier_zero_params_give_even_odds_and_bias_shifts_them() {
        let mut bundle = ModelBundle::new(&small_config(), &Rng::new(11)).unwrap();
        bundle.classifier.w = Tensor::zeros(&[16, 1]);
        bundle.classifier.b = Tensor::zeros(&[1]);
        let mut rng = Rng::new(12);
        let x = random_images(&mut rng, 2, 16);

        let logits = |bundle: &ModelBundle, x: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let vars = bundle.register(&mut tape);
            let e = vars.encode(&mut tape, xv).unwrap();
            let l = vars.classify(&mut tape, e).unwrap();
            assert_eq!(tape.value(l).shape(), &[2, 1]);
            tape.value(l).data().to_vec()
        };

        for v in logits(&bundle, &x) {
            assert_eq!(v, 0.0); // sigmoid(0) = 0.5
        }
        bundle.classifier.b = Tensor::from_vec(&[1], vec![1.25]).unwrap();
        for v in logits(&bundle, &x) {
            assert_eq!(v, 1.25);
        }
    }

    #[test]
    fn same_seed_builds_bitwise_identical_bundles() {
        let a = ModelBundle::new(&ModelConfig::default(), &Rng::new(42)).unwrap();
        let b = ModelBundle::new(&ModelConfig::default(), &Rng::new(42)).unwrap();
        for ((na, ta, _), (nb, tb, _)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(na, nb);
            assert!(ta
                .data()
                .iter()
                .zip(tb.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let c = ModelBundle::new(&ModelConfig::default(), &Rng::new(43)).unwrap();
        let diff = a
            .named_params()
            .iter()
            .zip(c.named_params().iter())
            .any(|((_, ta, _), (_, tc, _))| ta.data() != tc.data());
        assert!(diff, "different seeds must differ");
    }

    #[test]
    fn frozen_components_receive_no_gradients() {
        let mut bundle = ModelBundle::new(&small_config(), &Rng::new(20)).unwrap();
        bundle.frozen = FrozenFlags::stage2();
        let mut rng = Rng::new(21);
        let x = random_images(&mut rng, 2, 16);

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars = bundle.register(&mut tape);
        let e = vars.encode(&mut tape, xv).unwrap();
        let z = vars.project_aux(&mut tape, e).unwrap();
        let l = vars.classify(&mut tape, e).unwrap();
        let zsum = tape.sum(z).unwrap();
        let lsum = tape.sum(l).unwrap();
        let loss = tape.add(zsum, lsum).unwrap();
        let grads = tape.backward(loss).unwrap();

        let ordered = vars.ordered();
        for (i, (name, _, trainable)) in bundle.named_params().iter().enumerate() {
            let has = grads.get(ordered[i]).is_some();
            assert_eq!(has, *trainable, "{name}: gradient presence {has}");
            if *trainable {
                let g = grads.get(ordered[i]).unwrap();
                assert!(g.data().iter().all(|v| v.is_finite()));
            }
        }
    }
}
