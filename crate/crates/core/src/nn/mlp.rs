use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gemm::{gemm, Layout};
use super::params::{Grads, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// x · sigmoid(x)
    #[default]
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f32) -> f32 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    #[inline]
    fn derivative(self, z: f32) -> f32 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

/// Architecture of a feed-forward network whose first layer sees
/// `[data | time embedding | prompt embedding]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_width: usize,
    pub hidden: Vec<usize>,
    pub output_width: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub time_embed_width: usize,
    #[serde(default)]
    pub prompt_embed_width: usize,
    pub seed: u64,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.output_width == 0 {
            return Err(Error::Config(
                "network input/output widths must be >= 1".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        if self.time_embed_width % 2 != 0 {
            return Err(Error::Config(format!(
                "time embedding width must be even, got {}",
                self.time_embed_width
            )));
        }
        Ok(())
    }

    /// Width of the concatenated first-layer input.
    pub fn full_input_width(&self) -> usize {
        self.input_width + self.time_embed_width + self.prompt_embed_width
    }

    /// (fan_in, fan_out) for every dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.full_input_width()];
        widths.extend(&self.hidden);
        widths.push(self.output_width);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Builds the dense layers named `layers.{i}.weight` (`[out, in]`) and
/// `layers.{i}.bias`, drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_network(cfg: &NetConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    for (i, (fan_in, fan_out)) in cfg.layer_dims().into_iter().enumerate() {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let mut w = Tensor::zeros(format!("layers.{i}.weight"), vec![fan_out, fan_in]);
        w.data
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-bound..bound));
        let mut b = Tensor::zeros(format!("layers.{i}.bias"), vec![fan_out]);
        b.data
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-bound..bound));
        store.push(w);
        store.push(b);
    }
    Ok(store)
}

/// Activations saved by [`Network::forward_cached`] for the backward pass.
pub struct ForwardCache {
    batch: usize,
    /// Pre-activation values of each hidden layer.
    pre: Vec<Vec<f32>>,
    /// Post-activation values of each hidden layer.
    post: Vec<Vec<f32>>,
    pub output: Vec<f32>,
}

/// A feed-forward network: configuration plus the store holding its weights.
///
/// The store may hold extra arrays (embedding tables) beyond the dense layers;
/// the network only touches the arrays it created.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    cfg: NetConfig,
    params: ParamStore,
    layer_index: Vec<(usize, usize)>,
}

impl Network {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        let params = init_network(&cfg)?;
        Self::from_params(cfg, params)
    }

    pub fn from_params(cfg: NetConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut layer_index = Vec::new();
        for (i, (fan_in, fan_out)) in cfg.layer_dims().into_iter().enumerate() {
            let w = params
                .index_of(&format!("layers.{i}.weight"))
                .ok_or_else(|| Error::Config(format!("missing layers.{i}.weight")))?;
            let b = params
                .index_of(&format!("layers.{i}.bias"))
                .ok_or_else(|| Error::Config(format!("missing layers.{i}.bias")))?;
            if params.at(w).shape != [fan_out, fan_in] || params.at(b).shape != [fan_out] {
                return Err(Error::Config(format!(
                    "layer {i} shape does not match config"
                )));
            }
            layer_index.push((w, b));
        }
        Ok(Self {
            cfg,
            params,
            layer_index,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Single-sample evaluation on separately supplied input parts.
    pub fn forward(&self, x: &[f32], t_embed: &[f32], c_embed: &[f32]) -> Result<Vec<f32>> {
        let cfg = &self.cfg;
        for (got, expected, what) in [
            (x.len(), cfg.input_width, "network data input"),
            (t_embed.len(), cfg.time_embed_width, "time embedding"),
            (c_embed.len(), cfg.prompt_embed_width, "prompt embedding"),
        ] {
            if got != expected {
                return Err(Error::Dimension {
                    context: what.into(),
                    expected,
                    got,
                });
            }
        }
        let mut row = Vec::with_capacity(cfg.full_input_width());
        row.extend_from_slice(x);
        row.extend_from_slice(t_embed);
        row.extend_from_slice(c_embed);
        self.forward_batch(&row, 1)
    }

    /// Evaluates `batch` row-major input rows of width [`NetConfig::full_input_width`].
    pub fn forward_batch(&self, input: &[f32], batch: usize) -> Result<Vec<f32>> {
        Ok(self.forward_cached(input, batch)?.output)
    }

    pub fn forward_cached(&self, input: &[f32], batch: usize) -> Result<ForwardCache> {
        let width = self.cfg.full_input_width();
        if input.len() != batch * width {
            return Err(Error::Dimension {
                context: "network input batch".into(),
                expected: batch * width,
                got: input.len(),
            });
        }
        let n_layers = self.layer_index.len();
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut post: Vec<Vec<f32>> = Vec::with_capacity(n_layers - 1);
        let mut output = Vec::new();
        for (l, &(wi, bi)) in self.layer_index.iter().enumerate() {
            let w = self.params.at(wi);
            let (fan_out, fan_in) = (w.shape[0], w.shape[1]);
            let x: &[f32] = if l == 0 { input } else { &post[l - 1] };
            let mut z = vec![0.0f32; batch * fan_out];
            affine(
                x,
                batch,
                fan_in,
                &w.data,
                &self.params.at(bi).data,
                fan_out,
                &mut z,
            );
            if l + 1 == n_layers {
                output = z;
            } else {
                let act = self.cfg.activation;
                let h = z.iter().map(|&v| act.apply(v)).collect();
                pre.push(z);
                post.push(h);
            }
        }
        Ok(ForwardCache {
            batch,
            pre,
            post,
            output,
        })
    }

    /// Accumulates parameter gradients of `sum(d_out · output)` into `grads`.
    ///
    /// When `input_cols` is given, also returns the gradient with respect to that
    /// column range of the first-layer input (row-major, `batch × range.len()`).
    pub fn backward(
        &self,
        input: &[f32],
        cache: &ForwardCache,
        d_out: &[f32],
        grads: &mut Grads,
        input_cols: Option<std::ops::Range<usize>>,
    ) -> Result<Option<Vec<f32>>> {
        let batch = cache.batch;
        let n_layers = self.layer_index.len();
        if d_out.len() != batch * self.cfg.output_width {
            return Err(Error::Dimension {
                context: "output gradient".into(),
                expected: batch * self.cfg.output_width,
                got: d_out.len(),
            });
        }
        let mut delta = d_out.to_vec();
        let mut input_grad = None;
        for l in (0..n_layers).rev() {
            let (wi, bi) = self.layer_index[l];
            let w = self.params.at(wi);
            let (fan_out, fan_in) = (w.shape[0], w.shape[1]);
            let x: &[f32] = if l == 0 { input } else { &cache.post[l - 1] };

            // dW[out, in] += delta^T · x
            gemm(
                fan_out,
                batch,
                fan_in,
                &delta,
                Layout::col_major(fan_out),
                x,
                Layout::row_major(fan_in),
                1.0,
                &mut grads.arrays[wi],
                Layout::row_major(fan_in),
            );
            let gb = &mut grads.arrays[bi];
            for row in delta.chunks_exact(fan_out) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }

            if l > 0 {
                // dX = delta · W, then through the activation derivative.
                let mut dx = vec![0.0f32; batch * fan_in];
                gemm(
                    batch,
                    fan_out,
                    fan_in,
                    &delta,
                    Layout::row_major(fan_out),
                    &w.data,
                    Layout::row_major(fan_in),
                    0.0,
                    &mut dx,
                    Layout::row_major(fan_in),
                );
                let act = self.cfg.activation;
                for (d, &z) in dx.iter_mut().zip(&cache.pre[l - 1]) {
                    *d *= act.derivative(z);
                }
                delta = dx;
            } else if let Some(range) = input_cols.clone() {
                let cols = range.len();
                let mut dx = vec![0.0f32; batch * cols];
                gemm(
                    batch,
                    fan_out,
                    cols,
                    &delta,
                    Layout::row_major(fan_out),
                    &w.data[range.start..],
                    Layout::row_major(fan_in),
                    0.0,
                    &mut dx,
                    Layout::row_major(cols),
                );
                input_grad = Some(dx);
            }
        }
        Ok(input_grad)
    }
}

/// out[b, o] = bias[o] + sum_i x[b, i] · w[o, i]
fn affine(
    x: &[f32],
    batch: usize,
    fan_in: usize,
    w: &[f32],
    bias: &[f32],
    fan_out: usize,
    out: &mut [f32],
) {
    for row in out.chunks_exact_mut(fan_out) {
        row.copy_from_slice(bias);
    }
    gemm(
        batch,
        fan_in,
        fan_out,
        x,
        Layout::row_major(fan_in),
        w,
        Layout::col_major(fan_in),
        1.0,
        out,
        Layout::row_major(fan_out),
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> NetConfig {
        NetConfig {
            input_width: 5,
            hidden: vec![7, 4],
            output_width: 3,
            activation: Activation::Silu,
            time_embed_width: 2,
            prompt_embed_width: 3,
            seed,
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_network(&small_cfg(11)).unwrap();
        let b = init_network(&small_cfg(11)).unwrap();
        assert_eq!(a.to_checkpoint_bytes(""), b.to_checkpoint_bytes(""));
        let c = init_network(&small_cfg(12)).unwrap();
        assert!(a
            .arrays()
            .iter()
            .zip(c.arrays())
            .any(|(x, y)| x.data != y.data));
        assert_eq!(a.step(), 0);
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = NetConfig {
            input_width: 6244,
            hidden: vec![512, 512],
            output_width: 6144,
            activation: Activation::Silu,
            time_embed_width: 0,
            prompt_embed_width: 0,
            seed: 0,
        };
        let expected = 6244 * 512 + 512 + 512 * 512 + 512 + 512 * 6144 + 6144;
        assert_eq!(cfg.param_count(), expected);
        assert_eq!(init_network(&cfg).unwrap().param_count(), expected);
    }

    #[test]
    fn invalid_widths_are_config_errors() {
        let mut cfg = small_cfg(0);
        cfg.hidden = vec![4, 0];
        assert!(matches!(init_network(&cfg), Err(Error::Config(_))));
        let mut cfg = small_cfg(0);
        cfg.output_width = 0;
        assert!(matches!(init_network(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut net = Network::new(small_cfg(3)).unwrap();
        for i in 0..net.params().len() {
            net.params_mut()
                .data_mut(i)
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let out = net
            .forward(&[1.0, -2.0, 3.0, 0.5, 9.0], &[0.3, 0.1], &[1.0, 1.0, -1.0])
            .unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn forward_is_pure_and_checks_shapes() {
        let net = Network::new(small_cfg(5)).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4, 0.0];
        let a = net.forward(&x, &[0.5, -0.5], &[0.0, 1.0, 2.0]).unwrap();
        let b = net.forward(&x, &[0.5, -0.5], &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            net.forward(&x[..4], &[0.5, -0.5], &[0.0, 1.0, 2.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn batched_rows_match_single_rows_bitwise() {
        let cfg = NetConfig {
            input_width: 37,
            hidden: vec![19, 23],
            output_width: 11,
            activation: Activation::Silu,
            time_embed_width: 4,
            prompt_embed_width: 3,
            seed: 9,
        };
        let net = Network::new(cfg.clone()).unwrap();
        let w = cfg.full_input_width();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<f32> = (0..13 * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batched = net.forward_batch(&rows, 13).unwrap();
        for (b, row) in rows.chunks_exact(w).enumerate() {
            let single = net.forward_batch(row, 1).unwrap();
            assert_eq!(single, batched[b * 11..(b + 1) * 11]);
        }
    }
}
