//! Sensory distillation: frozen patch encoder, readout-token layer, state
//! embedding and the attention fusion that yields the sensory token.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::nn::{attention, LayerNorm, Linear, Mlp, TransformerLayer};
use crate::params::{ParamId, Params};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Image side length in pixels.
pub const IMAGE_SIZE: usize = 32;
/// Patch side length in pixels.
pub const PATCH_PX: usize = 8;
/// Patches per image side.
pub const PATCH_GRID: usize = IMAGE_SIZE / PATCH_PX;
pub const NUM_PATCHES: usize = PATCH_GRID * PATCH_GRID;
/// Token width shared by every module.
pub const TOKEN_DIM: usize = 64;
/// Proprioception length.
pub const PROPRIO_DIM: usize = 6;
const PATCH_INPUT: usize = PATCH_PX * PATCH_PX * 3;
/// Small init keeps the learned token from drowning the image-dependent part of the readout.
const READOUT_INIT_STD: f64 = 0.02;
/// Position embeddings start at the scale of a patch feature; any smaller and
/// the per-row layer norm erases where a patch is, leaving only what it shows.
const POS_INIT_STD: f64 = 0.5;
pub const READOUT_HEADS: usize = 4;

/// One camera frame plus proprioception.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationFrame {
    /// `IMAGE_SIZE×IMAGE_SIZE×3`, row-major, channel last.
    pub image: Vec<u8>,
    /// Normalised to `[-1, 1]`.
    pub proprio: [f32; PROPRIO_DIM],
    pub step_index: usize,
}

impl ObservationFrame {
    pub fn validate(&self) -> Result<()> {
        if self.image.len() != IMAGE_SIZE * IMAGE_SIZE * 3 {
            return Err(contract(format!(
                "image has {} bytes, expected {}",
                self.image.len(),
                IMAGE_SIZE * IMAGE_SIZE * 3
            )));
        }
        if self.proprio.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(contract("proprio outside [-1, 1]"));
        }
        Ok(())
    }
}

/// Frozen random linear patch projection standing in for a pretrained backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEncoder {
    pub seed: u64,
    /// `(PATCH_PX²·3)×TOKEN_DIM`.
    pub weight: Tensor<f32>,
}

impl PatchEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9a7c);
        let std = 1.0 / libm::sqrt(PATCH_INPUT as f64) * 2.0;
        Self {
            seed,
            weight: Tensor::randn(&[PATCH_INPUT, TOKEN_DIM], std, &mut rng),
        }
    }

    pub fn from_weight(seed: u64, weight: Tensor<f32>) -> Result<Self> {
        if weight.shape() != [PATCH_INPUT, TOKEN_DIM] {
            return Err(contract("patch encoder weight has the wrong shape"));
        }
        Ok(Self { seed, weight })
    }

    /// Splits the image into non-overlapping patches and projects each one.
    /// Output row `r·PATCH_GRID + c` holds patch `(r, c)`.
    pub fn encode(&self, frame: &ObservationFrame) -> Result<Tensor<f32>> {
        frame.validate()?;
        let mut flat = Vec::with_capacity(NUM_PATCHES * PATCH_INPUT);
        for pr in 0..PATCH_GRID {
            for pc in 0..PATCH_GRID {
                for y in 0..PATCH_PX {
                    let row = (pr * PATCH_PX + y) * IMAGE_SIZE;
                    for x in 0..PATCH_PX {
                        let px = (row + pc * PATCH_PX + x) * 3;
                        for ch in 0..3 {
                            flat.push(frame.image[px + ch] as f32 / 255.0);
                        }
                    }
                }
            }
        }
        let mut out = alloc::vec![0.0f32; NUM_PATCHES * TOKEN_DIM];
        f32::gemm(
            NUM_PATCHES,
            PATCH_INPUT,
            TOKEN_DIM,
            &flat,
            PATCH_INPUT as isize,
            1,
            self.weight.data(),
            TOKEN_DIM as isize,
            1,
            &mut out,
            false,
        );
        Ok(Tensor::matrix(NUM_PATCHES, TOKEN_DIM, out))
    }

    /// Order-sensitive FNV-1a digest of the weight bytes.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.weight.data() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Learnable readout token and the transformer layer it queries through.
///
/// Patch features carry no location of their own, so a learned per-patch
/// position embedding is added before the layer (a pretrained backbone
/// would supply this).
#[derive(Debug, Clone)]
pub struct Readout {
    pub token: ParamId,
    pub pos: ParamId,
    pub layer: TransformerLayer,
}

impl Readout {
    pub fn new<T: Scalar, R: rand::Rng + ?Sized>(params: &mut Params<T>, rng: &mut R) -> Self {
        Self {
            token: params.add(
                "encoder.readout.token",
                Tensor::randn(&[1, TOKEN_DIM], READOUT_INIT_STD, rng),
                true,
            ),
            pos: params.add(
                "encoder.readout.pos",
                Tensor::randn(&[NUM_PATCHES, TOKEN_DIM], POS_INIT_STD, rng),
                true,
            ),
            layer: TransformerLayer::new(params, "encoder.readout.layer", TOKEN_DIM, 2 * TOKEN_DIM, rng)
                .with_heads(READOUT_HEADS),
        }
    }

    /// Readout position output of one layer over `[token; patches]`.
    pub fn distill<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<T>, patches: Var) -> Result<Var> {
        let tok = g.param(p, self.token);
        let pos = g.param(p, self.pos);
        let patches = g.add(patches, pos)?;
        let x = g.concat_rows(&[tok, patches])?;
        self.layer.forward_rows(g, p, x, 0, 1, false)
    }
}

/// Proprioception MLP `D_s → C → C`.
#[derive(Debug, Clone)]
pub struct StateEmbed {
    pub mlp: Mlp,
}

impl StateEmbed {
    pub fn new<T: Scalar, R: rand::Rng + ?Sized>(params: &mut Params<T>, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new(params, "encoder.state", (PROPRIO_DIM, TOKEN_DIM, TOKEN_DIM), rng),
        }
    }

    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<T>, proprio: &[f32]) -> Result<Var> {
        if proprio.len() != PROPRIO_DIM {
            return Err(contract(format!("proprio length {} != {PROPRIO_DIM}", proprio.len())));
        }
        let x = g.constant(Tensor::row(proprio.iter().map(|&v| c(v as f64)).collect()));
        self.mlp.forward(g, p, x)
    }
}

/// Attention fusion of the visual readout (query) and state embedding (key and value).
#[derive(Debug, Clone)]
pub struct Fusion {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub ln: LayerNorm,
}

impl Fusion {
    pub fn new<T: Scalar, R: rand::Rng + ?Sized>(params: &mut Params<T>, rng: &mut R) -> Self {
        Self {
            wq: Linear::new(params, "encoder.fusion.q", TOKEN_DIM, TOKEN_DIM, false, rng),
            wk: Linear::new(params, "encoder.fusion.k", TOKEN_DIM, TOKEN_DIM, false, rng),
            wv: Linear::new(params, "encoder.fusion.v", TOKEN_DIM, TOKEN_DIM, false, rng),
            ln: LayerNorm::new(params, "encoder.fusion.ln", TOKEN_DIM),
        }
    }

    /// `LN(softmax((F_R W_Q)(F_S W_K)ᵀ/√C)(F_S W_V) + F_R)`, computed literally.
    ///
    /// With a single query and a single key the softmax is exactly 1, so the
    /// result is bitwise equal to [`Fusion::fuse_reduced`] and `W_Q`, `W_K`
    /// receive exactly zero gradient.
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<T>, f_r: Var, f_s: Var) -> Result<Var> {
        let q = self.wq.forward(g, p, f_r)?;
        let k = self.wk.forward(g, p, f_s)?;
        let v = self.wv.forward(g, p, f_s)?;
        let a = attention(g, q, k, v, false)?;
        let y = g.add(a, f_r)?;
        self.ln.forward(g, p, y)
    }

    /// `LN(F_S W_V + F_R)`.
    pub fn fuse_reduced<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<T>, f_r: Var, f_s: Var) -> Result<Var> {
        let v = self.wv.forward(g, p, f_s)?;
        let y = g.add(v, f_r)?;
        self.ln.forward(g, p, y)
    }
}

/// The whole sensory distillation path.
#[derive(Debug, Clone)]
pub struct SensoryEncoder {
    pub readout: Readout,
    pub state: StateEmbed,
    pub fusion: Fusion,
}

impl SensoryEncoder {
    pub fn new<T: Scalar, R: rand::Rng + ?Sized>(params: &mut Params<T>, rng: &mut R) -> Self {
        Self {
            readout: Readout::new(params, rng),
            state: StateEmbed::new(params, rng),
            fusion: Fusion::new(params, rng),
        }
    }

    /// Sensory token `F_O` from precomputed patch features and proprioception.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Params<T>,
        patches: &Tensor<T>,
        proprio: &[f32],
    ) -> Result<Var> {
        if patches.dims2() != (NUM_PATCHES, TOKEN_DIM) {
            return Err(contract(format!(
                "patch features {:?}, expected [{NUM_PATCHES}, {TOKEN_DIM}]",
                patches.shape()
            )));
        }
        let pv = g.constant(patches.clone());
        let f_r = self.readout.distill(g, p, pv)?;
        let f_s = self.state.embed(g, p, proprio)?;
        self.fusion.fuse(g, p, f_r, f_s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::check_params;
    use alloc::vec;

    fn frame(image: Vec<u8>) -> ObservationFrame {
        ObservationFrame {
            image,
            proprio: [0.0; PROPRIO_DIM],
            step_index: 0,
        }
    }

    fn noisy_image(seed: u64) -> Vec<u8> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..IMAGE_SIZE * IMAGE_SIZE * 3).map(|_| rng.random()).collect()
    }

    #[test]
    fn black_image_encodes_to_zero() {
        let out = PatchEncoder::new(0)
            .encode(&frame(vec![0; IMAGE_SIZE * IMAGE_SIZE * 3]))
            .unwrap();
        assert_eq!(out.shape(), &[NUM_PATCHES, TOKEN_DIM]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_images_encode_identically() {
        let enc = PatchEncoder::new(4);
        let a = enc.encode(&frame(noisy_image(1))).unwrap();
        let b = enc.encode(&frame(noisy_image(1))).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn pixel_change_in_first_patch_touches_only_row_zero() {
        let enc = PatchEncoder::new(2);
        let base = noisy_image(3);
        let mut moved = base.clone();
        // Pixel (x=5, y=6), green channel: inside patch (0, 0).
        let i = (6 * IMAGE_SIZE + 5) * 3 + 1;
        moved[i] = moved[i].wrapping_add(97);
        let a = enc.encode(&frame(base)).unwrap();
        let b = enc.encode(&frame(moved)).unwrap();
        assert_ne!(a.row_slice(0), b.row_slice(0));
        for r in 1..NUM_PATCHES {
            assert_eq!(a.row_slice(r), b.row_slice(r), "row {r}");
        }
    }

    #[test]
    fn encoding_matches_direct_projection() {
        let enc = PatchEncoder::new(8);
        let img = noisy_image(8);
        let out = enc.encode(&frame(img.clone())).unwrap();
        // Patch (1, 2) is output row 6; its input vector lists pixels row by row.
        let (pr, pc) = (1, 2);
        let mut x = Vec::new();
        for y in 0..PATCH_PX {
            for xx in 0..PATCH_PX {
                let p = ((pr * PATCH_PX + y) * IMAGE_SIZE + pc * PATCH_PX + xx) * 3;
                x.extend((0..3).map(|ch| img[p + ch] as f64 / 255.0));
            }
        }
        for j in 0..TOKEN_DIM {
            let want: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * enc.weight.data()[i * TOKEN_DIM + j] as f64)
                .sum();
            assert!((out.row_slice(6)[j] as f64 - want).abs() < 1e-4);
        }
    }

    #[test]
    fn malformed_inputs_are_contract_errors() {
        let enc = PatchEncoder::new(0);
        assert!(enc.encode(&frame(vec![0; 10])).is_err());
        let mut f = frame(vec![0; IMAGE_SIZE * IMAGE_SIZE * 3]);
        f.proprio[0] = 1.5;
        assert!(enc.encode(&f).is_err());
        let mut params = Params::<f64>::new();
        let state = StateEmbed::new(&mut params, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(state.embed(&mut Graph::new(), &params, &[0.0; 5]).is_err());
    }

    #[test]
    fn attention_over_equal_values_returns_that_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v: Vec<f64> = (0..TOKEN_DIM).map(|i| i as f64 * 0.1 - 2.0).collect();
        let mut g = Graph::<f64>::inference();
        let q = g.constant(Tensor::randn(&[1, TOKEN_DIM], 1.0, &mut rng));
        let k = g.constant(Tensor::randn(&[NUM_PATCHES, TOKEN_DIM], 1.0, &mut rng));
        let vals = g.constant(Tensor::matrix(NUM_PATCHES, TOKEN_DIM, v.repeat(NUM_PATCHES)));
        let out = attention(&mut g, q, k, vals, false).unwrap();
        for (a, b) in g.value(out).data().iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn distill_yields_one_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = Params::<f32>::new();
        let readout = Readout::new(&mut params, &mut rng);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::randn(&[NUM_PATCHES, TOKEN_DIM], 1.0, &mut rng));
        let y = readout.distill(&mut g, &params, x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, TOKEN_DIM]);
        assert!(g.value(y).is_finite());
    }

    #[test]
    fn readout_token_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = Params::<f64>::new();
        let readout = Readout::new(&mut params, &mut rng);
        let head = Tensor::randn(&[1, TOKEN_DIM], 1.0, &mut rng);
        let patches = Tensor::randn(&[NUM_PATCHES, TOKEN_DIM], 1.0, &mut rng);
        // Check only the readout token: freeze everything else.
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if id != readout.token {
                params.get_mut(id).trainable = false;
            }
        }
        let loss = |g: &mut Graph<f64>, p: &Params<f64>| -> Result<Var> {
            let x = g.constant(patches.clone());
            let y = readout.distill(g, p, x)?;
            let h = g.constant(head.clone());
            let s = g.mul(y, h)?;
            Ok(g.sum(s))
        };
        let r = check_params(&mut params, &loss, 1e-5, 0, &mut rng).unwrap();
        assert_eq!(r.checked, TOKEN_DIM);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    fn fusion_setup(seed: u64) -> (Params<f64>, Fusion, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let fusion = Fusion::new(&mut params, &mut rng);
        let f_r = Tensor::randn(&[1, TOKEN_DIM], 1.0, &mut rng);
        let f_s = Tensor::randn(&[1, TOKEN_DIM], 1.0, &mut rng);
        (params, fusion, f_r, f_s)
    }

    fn fused(p: &Params<f64>, f: &Fusion, f_r: &Tensor<f64>, f_s: &Tensor<f64>, literal: bool) -> Vec<f64> {
        let mut g = Graph::inference();
        let (a, b) = (g.constant(f_r.clone()), g.constant(f_s.clone()));
        let y = if literal {
            f.fuse(&mut g, p, a, b).unwrap()
        } else {
            f.fuse_reduced(&mut g, p, a, b).unwrap()
        };
        g.value(y).data().to_vec()
    }

    #[test]
    fn fusion_with_zero_value_projection_is_layer_norm_of_readout() {
        let (mut params, fusion, f_r, f_s) = fusion_setup(1);
        params.value_mut(fusion.wv.weight).data_mut().fill(0.0);
        let got = fused(&params, &fusion, &f_r, &f_s, true);
        let mean = f_r.data().iter().sum::<f64>() / TOKEN_DIM as f64;
        let var = f_r.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / TOKEN_DIM as f64;
        for (y, x) in got.iter().zip(f_r.data()) {
            assert!((y - (x - mean) / (var + 1e-5).sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn literal_and_reduced_fusion_agree_bitwise() {
        for seed in 0..10 {
            let (params, fusion, f_r, f_s) = fusion_setup(seed);
            let a = fused(&params, &fusion, &f_r, &f_s, true);
            let b = fused(&params, &fusion, &f_r, &f_s, false);
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "seed {seed}");
        }
    }

    #[test]
    fn query_and_key_projections_do_not_matter() {
        let (mut params, fusion, f_r, f_s) = fusion_setup(2);
        let before = fused(&params, &fusion, &f_r, &f_s, true);
        for v in params.value_mut(fusion.wq.weight).data_mut() {
            *v = *v * 3.0 - 1.0;
        }
        for v in params.value_mut(fusion.wk.weight).data_mut() {
            *v = -*v;
        }
        assert_eq!(before, fused(&params, &fusion, &f_r, &f_s, true));

        let mut g = Graph::new();
        let (a, b) = (g.constant(f_r.clone()), g.constant(f_s.clone()));
        let y = fusion.fuse(&mut g, &params, a, b).unwrap();
        let y = g.sum(y);
        let y = g.scale(y, 1.0);
        g.backward(y, &mut params).unwrap();
        let zero = |id| {
            params
                .grad(id)
                .map_or(true, |gr: &[f64]| gr.iter().all(|&v| v.abs() < 1e-12))
        };
        assert!(zero(fusion.wq.weight) && zero(fusion.wk.weight));
        assert!(params.grad(fusion.wv.weight).is_some());
    }
}
