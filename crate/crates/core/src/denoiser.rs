//! Conditional noise-prediction network.
//!
//! A two-level convolutional encoder-decoder with a sinusoidal time
//! embedding. Each level ends in an attention site that applies four
//! residual cross-attention branches in order: global text (GTCA),
//! low-frequency text (LFCA), high-frequency text (HFCA) and LR image
//! features (LRCA).
//!
//! ```text
//! concat(z_t, z_lr) -> conv_in -> enc0 resblocks -> site0 ----------------+
//!   -> down (stride 2) -> enc1 resblocks -> site1 -> up -> concat(skip) <--+
//!   -> dec resblocks -> silu -> conv_out --(+ input skip)--> eps
//! ```
//!
//! The input skip adds `conv3x3([z_t; z_lr]) + a(t) ⊙ z_t + b(t) ⊙ z_lr`,
//! with per-channel `a(t)`, `b(t)` projected from the time embedding.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::diffusion::{
    forward_diffuse, Conditioning, LatentTensor, NoisePredictor, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::prior::{Embeddings, LrFeatureTokens, PriorBundle};
use crate::rng::normal_vec;
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// Residual blocks per level (encoder and decoder).
    pub depth: usize,
    /// Attention width shared by all branches.
    pub embed_dim: usize,
    pub attention_heads: usize,
    pub enable_gtca: bool,
    pub enable_lfca: bool,
    pub enable_hfca: bool,
    pub enable_lrca: bool,
    /// LFCA and HFCA both attend over the row concatenation `[E_lf; E_hf]`.
    pub mixed_frequency_mode: bool,
    /// Run LRCA only at the last attention site.
    pub lrca_final_only: bool,
    pub latent_channels: usize,
    pub text_dim: usize,
    pub lr_token_dim: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_channels: 16,
            depth: 1,
            embed_dim: 16,
            attention_heads: 2,
            enable_gtca: true,
            enable_lfca: true,
            enable_hfca: true,
            enable_lrca: true,
            mixed_frequency_mode: false,
            lrca_final_only: false,
            latent_channels: 48,
            text_dim: 64,
            lr_token_dim: 32,
            time_dim: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Gtca,
    Lfca,
    Hfca,
    Lrca,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::Gtca, Branch::Lfca, Branch::Hfca, Branch::Lrca];

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Gtca => "gtca",
            Branch::Lfca => "lfca",
            Branch::Hfca => "hfca",
            Branch::Lrca => "lrca",
        }
    }
}

/// The order in which branches run inside every attention site.
pub const BRANCH_ORDER: [Branch; 4] = Branch::ALL;

pub const NUM_SITES: usize = 2;

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_channels", self.base_channels),
            ("depth", self.depth),
            ("embed_dim", self.embed_dim),
            ("attention_heads", self.attention_heads),
            ("latent_channels", self.latent_channels),
            ("text_dim", self.text_dim),
            ("lr_token_dim", self.lr_token_dim),
            ("time_dim", self.time_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("denoiser.{name} must be positive")));
            }
        }
        if self.embed_dim % self.attention_heads != 0 {
            return Err(Error::config(format!(
                "denoiser.embed_dim {} not divisible by attention_heads {}",
                self.embed_dim, self.attention_heads
            )));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::config("denoiser.time_dim must be even"));
        }
        if self.mixed_frequency_mode && !(self.enable_lfca && self.enable_hfca) {
            return Err(Error::config(
                "denoiser.mixed_frequency_mode requires enable_lfca and enable_hfca",
            ));
        }
        Ok(())
    }

    pub fn branch_enabled(&self, branch: Branch) -> bool {
        match branch {
            Branch::Gtca => self.enable_gtca,
            Branch::Lfca => self.enable_lfca,
            Branch::Hfca => self.enable_hfca,
            Branch::Lrca => self.enable_lrca,
        }
    }

    pub fn set_branch(&mut self, branch: Branch, enabled: bool) {
        match branch {
            Branch::Gtca => self.enable_gtca = enabled,
            Branch::Lfca => self.enable_lfca = enabled,
            Branch::Hfca => self.enable_hfca = enabled,
            Branch::Lrca => self.enable_lrca = enabled,
        }
    }

    fn site_channels(&self, site: usize) -> usize {
        self.base_channels << site
    }

    fn context_dim(&self, branch: Branch) -> usize {
        match branch {
            Branch::Lrca => self.lr_token_dim,
            _ => self.text_dim,
        }
    }

    /// Every parameter name with its shape. Branch flags do not affect the
    /// layout, so one checkpoint serves every ablation.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let b = self.base_channels;
        let cl = self.latent_channels;
        let td = self.time_dim;
        let d = self.embed_dim;
        let mut out = Vec::new();
        let mut push =
            |name: String, shape: Vec<usize>| out.push((format!("denoiser.{name}"), shape));
        push("conv_in.weight".into(), vec![b, 2 * cl, 3, 3]);
        push("conv_in.bias".into(), vec![b]);
        push("time.fc1.weight".into(), vec![td, td]);
        push("time.fc1.bias".into(), vec![td]);
        push("time.fc2.weight".into(), vec![td, td]);
        push("time.fc2.bias".into(), vec![td]);
        let res = |push: &mut dyn FnMut(String, Vec<usize>), p: String, ci: usize, co: usize| {
            push(format!("{p}.conv1.weight"), vec![co, ci, 3, 3]);
            push(format!("{p}.conv1.bias"), vec![co]);
            push(format!("{p}.time.weight"), vec![co, td]);
            push(format!("{p}.time.bias"), vec![co]);
            push(format!("{p}.conv2.weight"), vec![co, co, 3, 3]);
            push(format!("{p}.conv2.bias"), vec![co]);
            if ci != co {
                push(format!("{p}.skip.weight"), vec![co, ci, 1, 1]);
                push(format!("{p}.skip.bias"), vec![co]);
            }
        };
        for i in 0..self.depth {
            res(&mut push, format!("enc0.res{i}"), b, b);
        }
        push("down.weight".into(), vec![2 * b, b, 3, 3]);
        push("down.bias".into(), vec![2 * b]);
        for i in 0..self.depth {
            res(&mut push, format!("enc1.res{i}"), 2 * b, 2 * b);
        }
        push("up.weight".into(), vec![b, 2 * b, 3, 3]);
        push("up.bias".into(), vec![b]);
        for i in 0..self.depth {
            let ci = if i == 0 { 2 * b } else { b };
            res(&mut push, format!("dec.res{i}"), ci, b);
        }
        push("conv_out.weight".into(), vec![cl, b, 3, 3]);
        push("conv_out.bias".into(), vec![cl]);
        push("skip.weight".into(), vec![cl, 2 * cl, 3, 3]);
        push("skip.bias".into(), vec![cl]);
        push("skip.time_z.weight".into(), vec![cl, td]);
        push("skip.time_z.bias".into(), vec![cl]);
        push("skip.time_lr.weight".into(), vec![cl, td]);
        push("skip.time_lr.bias".into(), vec![cl]);
        for site in 0..NUM_SITES {
            let c = self.site_channels(site);
            for branch in Branch::ALL {
                let p = format!("site{site}.{}", branch.as_str());
                let ctx = self.context_dim(branch);
                push(format!("{p}.norm.gamma"), vec![c]);
                push(format!("{p}.norm.beta"), vec![c]);
                push(format!("{p}.wq"), vec![d, c]);
                push(format!("{p}.wk"), vec![d, ctx]);
                push(format!("{p}.wv"), vec![d, ctx]);
                push(format!("{p}.bv"), vec![d]);
                push(format!("{p}.wo"), vec![c, d]);
                push(format!("{p}.gate"), vec![1]);
            }
        }
        out
    }

    /// Closed-form scalar parameter count.
    ///
    /// With `b` base channels, `L` latent channels, time width `τ`, attention
    /// width `d`, text width `e` and LR token width `f`:
    ///
    /// ```text
    /// res(i, o)  = 9io + 9o² + τo + 3o + [i != o](io + o)
    /// attn(c, x) = 2c + 2dc + 2dx + d + 1
    /// total = 18Lb + b + 2(τ² + τ)
    ///       + depth·res(b, b) + (18b² + 2b) + depth·res(2b, 2b) + (18b² + b)
    ///       + res(2b, b) + (depth − 1)·res(b, b) + 9bL + L
    ///       + 18L² + L + 2(τL + L)
    ///       + Σ_{c ∈ {b, 2b}} (3·attn(c, e) + attn(c, f))
    /// ```
    pub fn parameter_count(&self) -> usize {
        let b = self.base_channels;
        let l = self.latent_channels;
        let tau = self.time_dim;
        let d = self.embed_dim;
        let res = |i: usize, o: usize| {
            9 * i * o + 9 * o * o + tau * o + 3 * o + if i != o { i * o + o } else { 0 }
        };
        let attn = |c: usize, x: usize| 2 * c + 2 * d * c + 2 * d * x + d + 1;
        let mut total = 18 * l * b + b + 2 * (tau * tau + tau);
        total += self.depth * res(b, b) + (18 * b * b + 2 * b);
        total += self.depth * res(2 * b, 2 * b) + (18 * b * b + b);
        total += res(2 * b, b) + (self.depth - 1) * res(b, b);
        total += 9 * b * l + l;
        total += 18 * l * l + l + 2 * (tau * l + l);
        for c in [b, 2 * b] {
            total += 3 * attn(c, self.text_dim) + attn(c, self.lr_token_dim);
        }
        total
    }
}

/// Fresh parameters. Weights are `N(0, 1/fan_in)`; biases and LayerNorm
/// shifts are zero, LayerNorm scales one. The output convolution, the input
/// skip and every cross-attention gate start at zero, so an untrained network predicts zero
/// noise and every branch starts as the identity.
pub fn init_params(config: &DenoiserConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    for (stream, (name, shape)) in config.parameter_shapes().into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let zero = name.ends_with(".bias")
            || name.ends_with(".bv")
            || name.ends_with(".beta")
            || name.ends_with(".gate")
            || name.starts_with("denoiser.conv_out.")
            || name.starts_with("denoiser.skip.");
        let data = if zero {
            vec![0.0; n]
        } else if name.ends_with(".gamma") {
            vec![1.0; n]
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let std = 1.0 / (fan_in as f64).sqrt();
            normal_vec(seed, stream as u64, n)
                .into_iter()
                .map(|v| v * std)
                .collect()
        };
        store.insert(name, Array::from_vec(&shape, data)?);
    }
    Ok(store)
}

/// Sinusoidal embedding of a timestep: `[sin(t ω_i), cos(t ω_i)]` with
/// `ω_i = 10000^(-i / (dim/2))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Feature maps recorded inside one attention site, all `(C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteTaps {
    pub input: Array,
    /// After GTCA (`z^g`).
    pub z_g: Array,
    /// After LFCA (`z^lf`).
    pub z_lf: Array,
    /// After HFCA (`z^hf`).
    pub z_hf: Array,
    /// After LRCA.
    pub output: Array,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput {
    pub eps: LatentTensor,
    pub taps: Vec<SiteTaps>,
}

/// Conditioning context for one branch, prepared outside the tape.
struct Context {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    mask: Vec<bool>,
}

impl Context {
    fn from_embeddings(e: &Embeddings) -> Self {
        Context {
            rows: e.len(),
            dim: e.dim(),
            data: e.data().to_vec(),
            mask: e.mask().to_vec(),
        }
    }

    fn from_tokens(t: &LrFeatureTokens) -> Self {
        Context {
            rows: t.rows(),
            dim: t.dim(),
            data: t.data().to_vec(),
            mask: vec![true; t.rows()],
        }
    }

    fn is_active(&self) -> bool {
        self.rows > 0 && self.mask.iter().any(|&m| m)
    }
}

struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    fn new(tape: &mut Tape, params: &ParamStore, needs_grad: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), needs_grad)))
            .collect();
        Bound { vars }
    }

    fn p(&self, name: &str) -> Var {
        *self
            .vars
            .get(&format!("denoiser.{name}"))
            .unwrap_or_else(|| panic!("parameter denoiser.{name} not bound"))
    }
}

/// The noise-prediction network: a configuration plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Denoiser { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = init_params(&config, 0)?;
        expected.check_compatible(&params)?;
        if !params.all_finite() {
            return Err(Error::NonFinite("denoiser parameters"));
        }
        Ok(Denoiser { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Same parameters under different branch flags.
    pub fn with_config(&self, config: DenoiserConfig) -> Result<Self> {
        Denoiser::from_params(config, self.params.clone())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_inputs(&self, z_t: &LatentTensor, cond: &Conditioning<'_>) -> Result<()> {
        let c = &self.config;
        let [ch, h, w] = z_t.shape();
        if ch != c.latent_channels {
            return Err(Error::shape(
                "denoiser input channels",
                &[c.latent_channels],
                &[ch],
            ));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!("latent size {h}x{w} must be even")));
        }
        if cond.lr_latent.shape() != z_t.shape() {
            return Err(Error::shape(
                "denoiser LR latent",
                &z_t.shape(),
                &cond.lr_latent.shape(),
            ));
        }
        let p = cond.priors;
        for (slot, e) in [("global", &p.global), ("lf", &p.lf), ("hf", &p.hf)] {
            if e.dim() != c.text_dim {
                return Err(Error::config(format!(
                    "{slot} prior width {} does not match denoiser.text_dim {}",
                    e.dim(),
                    c.text_dim
                )));
            }
        }
        if cond.lr_tokens.rows() > 0 && cond.lr_tokens.dim() != c.lr_token_dim {
            return Err(Error::config(format!(
                "LR token width {} does not match denoiser.lr_token_dim {}",
                cond.lr_tokens.dim(),
                c.lr_token_dim
            )));
        }
        Ok(())
    }

    fn contexts(
        &self,
        priors: &PriorBundle,
        lr: &LrFeatureTokens,
    ) -> Result<BTreeMap<Branch, Context>> {
        let (lf, hf) = if self.config.mixed_frequency_mode {
            let both = priors.lf.concat(&priors.hf)?;
            (both.clone(), both)
        } else {
            (priors.lf.clone(), priors.hf.clone())
        };
        Ok(BTreeMap::from([
            (Branch::Gtca, Context::from_embeddings(&priors.global)),
            (Branch::Lfca, Context::from_embeddings(&lf)),
            (Branch::Hfca, Context::from_embeddings(&hf)),
            (Branch::Lrca, Context::from_tokens(lr)),
        ]))
    }

    fn res_block(&self, tape: &mut Tape, bp: &Bound, prefix: &str, x: Var, temb: Var) -> Var {
        let h = tape.silu(x);
        let (w1, b1) = (
            bp.p(&format!("{prefix}.conv1.weight")),
            bp.p(&format!("{prefix}.conv1.bias")),
        );
        let h = tape.conv2d(h, w1, Some(b1), 1, 1);
        let (tw, tb) = (
            bp.p(&format!("{prefix}.time.weight")),
            bp.p(&format!("{prefix}.time.bias")),
        );
        let tproj = tape.linear(temb, tw, Some(tb));
        let h = tape.add_channel(h, tproj);
        let h = tape.silu(h);
        let (w2, b2) = (
            bp.p(&format!("{prefix}.conv2.weight")),
            bp.p(&format!("{prefix}.conv2.bias")),
        );
        let h = tape.conv2d(h, w2, Some(b2), 1, 1);
        let skip_name = format!("denoiser.{prefix}.skip.weight");
        let skip = if bp.vars.contains_key(&skip_name) {
            let sb = bp.p(&format!("{prefix}.skip.bias"));
            tape.conv2d(x, bp.vars[&skip_name], Some(sb), 1, 0)
        } else {
            x
        };
        tape.add(h, skip)
    }

    fn cross_attention(
        &self,
        tape: &mut Tape,
        bp: &Bound,
        prefix: &str,
        h: Var,
        ctx: &Context,
    ) -> Var {
        let vars = CrossAttentionVars {
            gamma: bp.p(&format!("{prefix}.norm.gamma")),
            beta: bp.p(&format!("{prefix}.norm.beta")),
            wq: bp.p(&format!("{prefix}.wq")),
            wk: bp.p(&format!("{prefix}.wk")),
            wv: bp.p(&format!("{prefix}.wv")),
            bv: bp.p(&format!("{prefix}.bv")),
            wo: bp.p(&format!("{prefix}.wo")),
            gate: bp.p(&format!("{prefix}.gate")),
        };
        attend(tape, &vars, h, ctx, self.config.attention_heads)
    }

    /// Applies one branch of one site to a `(C, H, W)` feature map, honouring
    /// the enable flags and the mixed-frequency setting.
    pub fn apply_branch(
        &self,
        site: usize,
        branch: Branch,
        features: &Array,
        priors: &PriorBundle,
        lr_tokens: &LrFeatureTokens,
    ) -> Result<Array> {
        if site >= NUM_SITES {
            return Err(Error::OutOfRange {
                what: "attention site",
                index: site,
                len: NUM_SITES,
            });
        }
        let c = self.config.site_channels(site);
        let s = features.shape();
        if s.len() != 3 || s[0] != c {
            return Err(Error::shape("apply_branch features", &[c, 0, 0], s));
        }
        let contexts = self.contexts(priors, lr_tokens)?;
        let ctx = &contexts[&branch];
        if ctx.rows > 0 && ctx.dim != self.config.context_dim(branch) {
            return Err(Error::shape(
                "apply_branch context",
                &[self.config.context_dim(branch)],
                &[ctx.dim],
            ));
        }
        let skip_lr =
            branch == Branch::Lrca && self.config.lrca_final_only && site + 1 != NUM_SITES;
        if !self.config.branch_enabled(branch) || skip_lr {
            return Ok(features.clone());
        }
        let mut tape = Tape::new();
        let bp = Bound::new(&mut tape, &self.params, false);
        let x = tape.constant(features.clone());
        let tok = tape.to_tokens(x);
        let prefix = format!("site{site}.{}", branch.as_str());
        let out = self.cross_attention(&mut tape, &bp, &prefix, tok, ctx);
        let out = tape.from_tokens(out, s[1], s[2]);
        Ok(tape.value(out).clone())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_site(
        &self,
        tape: &mut Tape,
        bp: &Bound,
        site: usize,
        x: Var,
        contexts: &BTreeMap<Branch, Context>,
        order: &[Branch; 4],
        taps: &mut Vec<[Var; 5]>,
    ) -> Var {
        let shape = tape.value(x).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let input = x;
        let mut tok = tape.to_tokens(x);
        let mut after = BTreeMap::new();
        for &branch in order {
            let skip_lr =
                branch == Branch::Lrca && self.config.lrca_final_only && site + 1 != NUM_SITES;
            if self.config.branch_enabled(branch) && !skip_lr {
                let prefix = format!("site{site}.{}", branch.as_str());
                tok = self.cross_attention(tape, bp, &prefix, tok, &contexts[&branch]);
            }
            after.insert(branch, tok);
        }
        let map = |tape: &mut Tape, v: Var| tape.from_tokens(v, h, w);
        let g = map(tape, after[&Branch::Gtca]);
        let lf = map(tape, after[&Branch::Lfca]);
        let hf = map(tape, after[&Branch::Hfca]);
        let out = map(tape, tok);
        taps.push([input, g, lf, hf, out]);
        out
    }

    fn build(
        &self,
        tape: &mut Tape,
        bp: &Bound,
        z_t: &LatentTensor,
        t: usize,
        cond: &Conditioning<'_>,
        order: &[Branch; 4],
    ) -> Result<(Var, Vec<[Var; 5]>)> {
        self.check_inputs(z_t, cond)?;
        let contexts = self.contexts(cond.priors, cond.lr_tokens)?;
        let c = &self.config;

        let zt = tape.constant(z_t.to_array());
        let zl = tape.constant(cond.lr_latent.to_array());
        let x = tape.concat_channels(zt, zl);

        let temb = tape.constant(Array::from_vec(
            &[1, c.time_dim],
            timestep_embedding(t, c.time_dim),
        )?);
        let temb = tape.linear(temb, bp.p("time.fc1.weight"), Some(bp.p("time.fc1.bias")));
        let temb = tape.silu(temb);
        let temb = tape.linear(temb, bp.p("time.fc2.weight"), Some(bp.p("time.fc2.bias")));
        let temb = tape.silu(temb);

        let mut taps = Vec::with_capacity(NUM_SITES);
        let mut h = tape.conv2d(x, bp.p("conv_in.weight"), Some(bp.p("conv_in.bias")), 1, 1);
        for i in 0..c.depth {
            h = self.res_block(tape, bp, &format!("enc0.res{i}"), h, temb);
        }
        let skip = self.attention_site(tape, bp, 0, h, &contexts, order, &mut taps);
        h = tape.conv2d(skip, bp.p("down.weight"), Some(bp.p("down.bias")), 2, 1);
        for i in 0..c.depth {
            h = self.res_block(tape, bp, &format!("enc1.res{i}"), h, temb);
        }
        h = self.attention_site(tape, bp, 1, h, &contexts, order, &mut taps);
        h = tape.upsample2x(h);
        h = tape.conv2d(h, bp.p("up.weight"), Some(bp.p("up.bias")), 1, 1);
        h = tape.concat_channels(h, skip);
        for i in 0..c.depth {
            h = self.res_block(tape, bp, &format!("dec.res{i}"), h, temb);
        }
        h = tape.silu(h);
        let mut out = tape.conv2d(
            h,
            bp.p("conv_out.weight"),
            Some(bp.p("conv_out.bias")),
            1,
            1,
        );

        // Input skip: a linear path from [z_t; z_lr] plus time-dependent
        // per-channel scales of z_t and z_lr. The backbone is much narrower
        // than the latent, so without it the noise cannot be passed through.
        let s = tape.conv2d(x, bp.p("skip.weight"), Some(bp.p("skip.bias")), 1, 1);
        out = tape.add(out, s);
        let gz = tape.linear(
            temb,
            bp.p("skip.time_z.weight"),
            Some(bp.p("skip.time_z.bias")),
        );
        let sz = tape.scale_channel(zt, gz);
        out = tape.add(out, sz);
        let gl = tape.linear(
            temb,
            bp.p("skip.time_lr.weight"),
            Some(bp.p("skip.time_lr.bias")),
        );
        let sl = tape.scale_channel(zl, gl);
        out = tape.add(out, sl);
        Ok((out, taps))
    }

    /// Predicted noise for `z_t` at model timestep `t`.
    pub fn denoise_step(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &Conditioning<'_>,
    ) -> Result<LatentTensor> {
        Ok(self.forward_with_order(z_t, t, cond, &BRANCH_ORDER)?.eps)
    }

    /// Forward pass that also returns the intermediate branch outputs.
    pub fn forward(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &Conditioning<'_>,
    ) -> Result<DenoiserOutput> {
        self.forward_with_order(z_t, t, cond, &BRANCH_ORDER)
    }

    /// Forward pass with an explicit branch order. Anything other than
    /// [`BRANCH_ORDER`] is only useful for testing order sensitivity.
    pub fn forward_with_order(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &Conditioning<'_>,
        order: &[Branch; 4],
    ) -> Result<DenoiserOutput> {
        let mut tape = Tape::new();
        let bp = Bound::new(&mut tape, &self.params, false);
        let (out, tap_vars) = self.build(&mut tape, &bp, z_t, t, cond, order)?;
        let eps = LatentTensor::from_array(tape.value(out))?;
        let taps = tap_vars
            .into_iter()
            .map(|[i, g, lf, hf, o]| SiteTaps {
                input: tape.value(i).clone(),
                z_g: tape.value(g).clone(),
                z_lf: tape.value(lf).clone(),
                z_hf: tape.value(hf).clone(),
                output: tape.value(o).clone(),
            })
            .collect();
        Ok(DenoiserOutput { eps, taps })
    }

    /// Loss `mean((eps − eps_θ(z_t))²)` for one example and its gradient with
    /// respect to every parameter.
    pub fn example_loss_and_grads(
        &self,
        ex: &TrainExample<'_>,
        schedule: &NoiseSchedule,
    ) -> Result<(f64, ParamStore)> {
        let z_t = forward_diffuse(ex.z0, ex.t, ex.eps, schedule)?;
        let mut tape = Tape::new();
        let bp = Bound::new(&mut tape, &self.params, true);
        let (out, _) = self.build(&mut tape, &bp, &z_t, ex.t, &ex.cond, &BRANCH_ORDER)?;
        if !tape.value(out).all_finite() {
            return Err(Error::NonFinite("denoiser output"));
        }
        let loss = tape.mse_const(out, ex.eps.to_array());
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss);
        Ok((value, collect_grads(&bp, &mut grads, &self.params)))
    }

    /// Mean loss and mean gradient over a batch. Examples run in parallel;
    /// results are summed in batch order so the outcome does not depend on
    /// thread scheduling.
    pub fn loss_and_grads(
        &self,
        batch: &[TrainExample<'_>],
        schedule: &NoiseSchedule,
    ) -> Result<(f64, ParamStore)> {
        if batch.is_empty() {
            return Err(Error::config("empty training batch"));
        }
        let results: Vec<Result<(f64, ParamStore)>> = batch
            .par_iter()
            .map(|ex| self.example_loss_and_grads(ex, schedule))
            .collect();
        let mut total = 0.0;
        let mut sum = ParamStore::zeros_like(&self.params);
        for r in results {
            let (l, g) = r?;
            total += l;
            sum.accumulate(&g);
        }
        let k = 1.0 / batch.len() as f64;
        sum.scale(k);
        Ok((total * k, sum))
    }
}

struct CrossAttentionVars {
    gamma: Var,
    beta: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    gate: Var,
}

/// `h + gate · W_o attn(W_q LN(h), W_k ctx, W_v ctx + b_v)` on a token
/// matrix `h: (N, C)`. Returns `h` itself when the context has no valid rows.
fn attend(tape: &mut Tape, p: &CrossAttentionVars, h: Var, ctx: &Context, heads: usize) -> Var {
    if !ctx.is_active() {
        return h;
    }
    let x = tape.layer_norm(h, p.gamma, p.beta);
    let q = tape.linear(x, p.wq, None);
    let c = tape
        .constant(Array::from_vec(&[ctx.rows, ctx.dim], ctx.data.clone()).expect("context shape"));
    let k = tape.linear(c, p.wk, None);
    let v = tape.linear(c, p.wv, Some(p.bv));
    let a = tape.attention(q, k, v, heads, &ctx.mask);
    let o = tape.linear(a, p.wo, None);
    let g = tape.mul_scalar(o, p.gate);
    tape.add(h, g)
}

/// Parameters of a standalone cross-attention block. Shapes: `gamma, beta:
/// (C)`, `wq: (d, C)`, `wk, wv: (d, X)`, `bv: (d)`, `wo: (C, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionParams {
    pub gamma: Array,
    pub beta: Array,
    pub wq: Array,
    pub wk: Array,
    pub wv: Array,
    pub bv: Array,
    pub wo: Array,
    pub gate: f64,
}

/// Runs one cross-attention block on a `(C, H, W)` map against context rows
/// `(M, X)`. Rows whose mask entry is false are ignored; with no valid rows
/// the input is returned unchanged.
pub fn cross_attention_block(
    params: &CrossAttentionParams,
    heads: usize,
    features: &Array,
    context: &Embeddings,
) -> Result<Array> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::shape("cross_attention_block", &[0, 0, 0], s));
    }
    let d = params.wq.shape()[0];
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "{heads} heads do not divide width {d}"
        )));
    }
    let (c, x) = (s[0], context.dim());
    let expect: [(&[usize], Vec<usize>); 6] = [
        (params.gamma.shape(), vec![c]),
        (params.beta.shape(), vec![c]),
        (params.wq.shape(), vec![d, c]),
        (params.wk.shape(), vec![d, x]),
        (params.wv.shape(), vec![d, x]),
        (params.wo.shape(), vec![c, d]),
    ];
    for (got, want) in expect {
        if got != want.as_slice() {
            return Err(Error::shape("cross_attention_block params", &want, got));
        }
    }
    if params.bv.shape() != [d] {
        return Err(Error::shape(
            "cross_attention_block params",
            &[d],
            params.bv.shape(),
        ));
    }
    let ctx = Context::from_embeddings(context);
    let mut tape = Tape::new();
    let vars = CrossAttentionVars {
        gamma: tape.constant(params.gamma.clone()),
        beta: tape.constant(params.beta.clone()),
        wq: tape.constant(params.wq.clone()),
        wk: tape.constant(params.wk.clone()),
        wv: tape.constant(params.wv.clone()),
        bv: tape.constant(params.bv.clone()),
        wo: tape.constant(params.wo.clone()),
        gate: tape.constant(Array::scalar(params.gate)),
    };
    let x = tape.constant(features.clone());
    let tok = tape.to_tokens(x);
    let out = attend(&mut tape, &vars, tok, &ctx, heads);
    let out = tape.from_tokens(out, s[1], s[2]);
    Ok(tape.value(out).clone())
}

fn collect_grads(bp: &Bound, grads: &mut Gradients, params: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, value) in params.iter() {
        let g = grads
            .take(bp.vars[name])
            .unwrap_or_else(|| Array::zeros(value.shape()));
        out.insert(name.clone(), g);
    }
    out
}

/// One training example: clean latent, conditioning, timestep and noise.
#[derive(Clone, Copy, Debug)]
pub struct TrainExample<'a> {
    pub z0: &'a LatentTensor,
    pub cond: Conditioning<'a>,
    pub t: usize,
    pub eps: &'a LatentTensor,
}

impl NoisePredictor for Denoiser {
    fn predict_noise(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &Conditioning<'_>,
    ) -> Result<LatentTensor> {
        self.denoise_step(z_t, t, cond)
    }
}
