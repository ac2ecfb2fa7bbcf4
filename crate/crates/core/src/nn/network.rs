use serde::{Deserialize, Serialize};

use super::layer::{Layer, LayerCache, LayerSpec};
use super::loss::mape_loss;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{Seed, SeededRng};
use crate::selectivity::IndexSampler;

/// Minimum number of parameters compared by [`gradient_check`].
const CHECKED_PARAMS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Tabular,
    Histogram,
    Head,
}

/// Two input branches whose outputs are concatenated (tabular first) and
/// fed to a head ending in a single linear unit.
///
/// The tabular branch takes a vector of `tabular_inputs` values, the
/// histogram branch a `[1, histogram_side, histogram_side]` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub seed: Seed,
    pub tabular_inputs: usize,
    pub histogram_side: usize,
    pub tabular: Vec<Layer>,
    pub histogram: Vec<Layer>,
    pub head: Vec<Layer>,
}

#[derive(Debug, Clone)]
pub struct TailCache {
    tabular: Vec<LayerCache>,
    head: Vec<LayerCache>,
    tabular_width: usize,
}

#[derive(Debug, Clone)]
pub struct NetworkCache {
    histogram: Vec<LayerCache>,
    tail: TailCache,
}

/// Gradients in the network's canonical parameter order: tabular, then
/// histogram, then head layers; weight before bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.0.iter_mut().for_each(|t| t.scale(c));
    }
}

fn chain_shape(layers: &[LayerSpec], input: &[usize], first_index: usize) -> Result<Vec<usize>> {
    layers
        .iter()
        .enumerate()
        .try_fold(input.to_vec(), |shape, (i, spec)| {
            spec.output_shape(&shape).ok_or_else(|| Error::ShapeMismatch {
                layer: first_index + i,
                expected: vec![],
                actual: shape,
            })
        })
}

impl Network {
    /// Builds a network with seeded fan-in-scaled weights; fails if the
    /// layer stacks do not chain.
    pub fn new(
        seed: Seed,
        tabular_inputs: usize,
        histogram_side: usize,
        tabular: &[LayerSpec],
        histogram: &[LayerSpec],
        head: &[LayerSpec],
    ) -> Result<Self> {
        let tab_out = chain_shape(tabular, &[tabular_inputs], 0)?;
        let hist_out = chain_shape(
            histogram,
            &[1, histogram_side, histogram_side],
            tabular.len(),
        )?;
        let (&[a], &[b]) = (tab_out.as_slice(), hist_out.as_slice()) else {
            return Err(Error::InvalidArgument(
                "both branches must end in a vector".into(),
            ));
        };
        let out = chain_shape(head, &[a + b], tabular.len() + histogram.len())?;
        if out != [1] {
            return Err(Error::InvalidArgument("head must end in a single unit".into()));
        }
        let build = |specs: &[LayerSpec], branch: u64| {
            specs
                .iter()
                .enumerate()
                .map(|(i, spec)| {
                    let mut rng = SeededRng::new(seed.derive(&[branch, i as u64]));
                    Layer::initialized(*spec, &mut rng)
                })
                .collect()
        };
        Ok(Self {
            seed,
            tabular_inputs,
            histogram_side,
            tabular: build(tabular, 0),
            histogram: build(histogram, 1),
            head: build(head, 2),
        })
    }

    pub fn layers(&self, branch: Branch) -> &[Layer] {
        match branch {
            Branch::Tabular => &self.tabular,
            Branch::Histogram => &self.histogram,
            Branch::Head => &self.head,
        }
    }

    fn first_index(&self, branch: Branch) -> usize {
        match branch {
            Branch::Tabular => 0,
            Branch::Histogram => self.tabular.len(),
            Branch::Head => self.tabular.len() + self.histogram.len(),
        }
    }

    fn first_slot(&self, branch: Branch) -> usize {
        let slots = |layers: &[Layer]| 2 * layers.iter().filter(|l| l.params.is_some()).count();
        match branch {
            Branch::Tabular => 0,
            Branch::Histogram => slots(&self.tabular),
            Branch::Head => slots(&self.tabular) + slots(&self.histogram),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.tabular
            .iter()
            .chain(&self.histogram)
            .chain(&self.head)
            .filter_map(|l| l.params.as_ref())
            .flat_map(|p| [&p.weight, &p.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.tabular
            .iter_mut()
            .chain(&mut self.histogram)
            .chain(&mut self.head)
            .filter_map(|l| l.params.as_mut())
            .flat_map(|p| [&mut p.weight, &mut p.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients(self.params().into_iter().map(Tensor::zeros_like).collect())
    }

    /// Sets every weight and bias to zero.
    pub fn zero_weights(&mut self) {
        for t in self.params_mut() {
            t.data_mut().fill(0.0);
        }
    }

    fn run(&self, branch: Branch, input: &Tensor) -> Result<(Tensor, Vec<LayerCache>)> {
        let first = self.first_index(branch);
        let mut caches = Vec::new();
        let mut x = input.clone();
        for (i, layer) in self.layers(branch).iter().enumerate() {
            let (y, cache) = layer.forward(first + i, &x)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    fn run_back(
        &self,
        branch: Branch,
        caches: &[LayerCache],
        grad: Tensor,
        grads: &mut Gradients,
    ) -> Result<Tensor> {
        let layers = self.layers(branch);
        let first = self.first_index(branch);
        if caches.len() != layers.len() {
            return Err(Error::StaleCache { layer: first });
        }
        let mut slot = self.first_slot(branch) + 2 * layers.iter().filter(|l| l.params.is_some()).count();
        let mut g = grad;
        for (i, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
            let (gi, gp) = layer.backward(first + i, cache, &g)?;
            if let Some(gp) = gp {
                slot -= 2;
                grads.0[slot].add_assign(&gp.weight);
                grads.0[slot + 1].add_assign(&gp.bias);
            }
            g = gi;
        }
        Ok(g)
    }

    fn histogram_input(&self, hist: &Tensor) -> Result<Tensor> {
        let side = self.histogram_side;
        if hist.len() != side * side {
            return Err(Error::ShapeMismatch {
                layer: self.first_index(Branch::Histogram),
                expected: vec![1, side, side],
                actual: hist.shape().to_vec(),
            });
        }
        hist.clone().reshaped(vec![1, side, side])
    }

    /// Histogram branch only; its output can be shared by every example
    /// with the same histogram.
    pub fn forward_histogram(&self, hist: &Tensor) -> Result<(Tensor, Vec<LayerCache>)> {
        self.run(Branch::Histogram, &self.histogram_input(hist)?)
    }

    /// Tabular branch, concatenation and head, given histogram-branch output.
    pub fn forward_tail(&self, tabular: &Tensor, hist_features: &Tensor) -> Result<(f64, TailCache)> {
        let (t, tab_caches) = self.run(Branch::Tabular, tabular)?;
        let tabular_width = t.len();
        let mut joined = t.into_data();
        joined.extend_from_slice(hist_features.data());
        let (out, head_caches) = self.run(Branch::Head, &Tensor::vector(joined))?;
        Ok((
            out.data()[0],
            TailCache {
                tabular: tab_caches,
                head: head_caches,
                tabular_width,
            },
        ))
    }

    /// Accumulates tail gradients for `d loss / d output = grad_output` and
    /// returns the gradient w.r.t. the histogram-branch output.
    pub fn backward_tail(
        &self,
        cache: &TailCache,
        grad_output: f64,
        grads: &mut Gradients,
    ) -> Result<Tensor> {
        let g = self.run_back(Branch::Head, &cache.head, Tensor::vector(vec![grad_output]), grads)?;
        let mut joined = g.into_data();
        let hist_part = joined.split_off(cache.tabular_width);
        self.run_back(Branch::Tabular, &cache.tabular, Tensor::vector(joined), grads)?;
        Ok(Tensor::vector(hist_part))
    }

    pub fn backward_histogram(
        &self,
        caches: &[LayerCache],
        grad_features: Tensor,
        grads: &mut Gradients,
    ) -> Result<()> {
        self.run_back(Branch::Histogram, caches, grad_features, grads)?;
        Ok(())
    }

    /// Raw (untransformed) scalar output.
    pub fn forward(&self, tabular: &Tensor, hist: &Tensor) -> Result<(f64, NetworkCache)> {
        let (features, histogram) = self.forward_histogram(hist)?;
        let (out, tail) = self.forward_tail(tabular, &features)?;
        Ok((out, NetworkCache { histogram, tail }))
    }

    pub fn output(&self, tabular: &Tensor, hist: &Tensor) -> Result<f64> {
        Ok(self.forward(tabular, hist)?.0)
    }

    pub fn backward(&self, cache: &NetworkCache, grad_output: f64) -> Result<Gradients> {
        let mut grads = self.zero_gradients();
        let g = self.backward_tail(&cache.tail, grad_output, &mut grads)?;
        self.backward_histogram(&cache.histogram, g, &mut grads)?;
        Ok(grads)
    }

    /// Single-example MAPE loss of the raw output and its parameter gradients.
    pub fn loss_gradients(&self, tabular: &Tensor, hist: &Tensor, target: f64) -> Result<(f64, Gradients)> {
        let (out, cache) = self.forward(tabular, hist)?;
        let (loss, g) = mape_loss(&[out], &[target])?;
        Ok((loss, self.backward(&cache, g[0])?))
    }
}

/// Max relative error between analytic gradients of the single-example MAPE
/// loss and central differences with step `eps`, over a seeded subsample of
/// at least 256 parameters (all of them if fewer).
pub fn gradient_check(net: &Network, tabular: &Tensor, hist: &Tensor, target: f64, eps: f64) -> Result<f64> {
    gradient_check_with(net, tabular, hist, target, eps, |n| {
        Ok(n.loss_gradients(tabular, hist, target)?.1)
    })
}

/// [`gradient_check`] against an arbitrary analytic-gradient routine.
pub fn gradient_check_with<F>(
    net: &Network,
    tabular: &Tensor,
    hist: &Tensor,
    target: f64,
    eps: f64,
    analytic: F,
) -> Result<f64>
where
    F: Fn(&Network) -> Result<Gradients>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps={eps} outside [1e-7, 1e-3]")));
    }
    let grads = analytic(net)?;
    let sizes: Vec<usize> = net.params().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let picks: Vec<usize> = if total <= CHECKED_PARAMS {
        (0..total).collect()
    } else {
        let mut rng = SeededRng::new(net.seed.derive(&[0x6772_6164]));
        let mut picked = IndexSampler::new(total).draw(total, CHECKED_PARAMS, &mut rng).to_vec();
        picked.sort_unstable();
        picked
    };
    let loss_at = |slot: usize, offset: usize, delta: f64| -> Result<f64> {
        let mut probe = net.clone();
        probe.params_mut()[slot].data_mut()[offset] += delta;
        let out = probe.output(tabular, hist)?;
        Ok(mape_loss(&[out], &[target])?.0)
    };
    let mut worst: f64 = 0.0;
    for flat in picks {
        let (mut slot, mut offset) = (0, flat);
        while offset >= sizes[slot] {
            offset -= sizes[slot];
            slot += 1;
        }
        let fd = (loss_at(slot, offset, eps)? - loss_at(slot, offset, -eps)?) / (2.0 * eps);
        let a = grads.0[slot].data()[offset];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> Network {
        Network::new(
            Seed(seed),
            2,
            8,
            &[LayerSpec::Dense { inputs: 2, outputs: 6 }, LayerSpec::Relu],
            &[
                LayerSpec::Conv2d { in_channels: 1, out_channels: 3 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::Flatten,
            ],
            &[
                LayerSpec::Dense { inputs: 6 + 27, outputs: 5 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 5, outputs: 1 },
            ],
        )
        .unwrap()
    }

    fn inputs() -> (Tensor, Tensor) {
        let mut rng = SeededRng::new(Seed(4));
        let hist = Tensor::new(vec![8, 8], (0..64).map(|_| rng.uniform()).collect()).unwrap();
        (Tensor::vector(vec![0.3, -1.2]), hist)
    }

    #[test]
    fn rejects_non_chaining_stacks() {
        let err = Network::new(
            Seed(1),
            2,
            4,
            &[LayerSpec::Dense { inputs: 3, outputs: 4 }],
            &[LayerSpec::Flatten],
            &[LayerSpec::Dense { inputs: 20, outputs: 1 }],
        );
        assert!(err.is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let (t, h) = inputs();
        let a = tiny(1).output(&t, &h).unwrap();
        let b = tiny(1).output(&t, &h).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_ne!(a, tiny(2).output(&t, &h).unwrap());
    }

    #[test]
    fn composed_gradient_check() {
        let (t, h) = inputs();
        let net = tiny(3);
        let err = gradient_check(&net, &t, &h, 0.7, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let (t, h) = inputs();
        let net = tiny(3);
        let err = gradient_check_with(&net, &t, &h, 0.7, 1e-5, |n| {
            let mut g = n.loss_gradients(&t, &h, 0.7)?.1;
            g.scale(2.0);
            Ok(g)
        })
        .unwrap();
        assert!(err > 0.3, "{err}");
    }

    #[test]
    fn zero_network_check_is_finite() {
        let mut net = tiny(5);
        net.zero_weights();
        let t = Tensor::vector(vec![0.0, 0.0]);
        let h = Tensor::zeros(vec![8, 8]);
        let err = gradient_check(&net, &t, &h, 0.5, 1e-5).unwrap();
        assert!(err.is_finite());
    }

    #[test]
    fn gradient_check_validates_eps() {
        let (t, h) = inputs();
        assert!(gradient_check(&tiny(1), &t, &h, 0.5, 1e-2).is_err());
    }

    #[test]
    fn serde_round_trip_is_bit_exact() {
        let (t, h) = inputs();
        let net = tiny(9);
        let text = serde_json::to_string(&net).unwrap();
        let back: Network = serde_json::from_str(&text).unwrap();
        assert_eq!(back, net);
        assert_eq!(
            back.output(&t, &h).unwrap().to_bits(),
            net.output(&t, &h).unwrap().to_bits()
        );
    }

    #[test]
    fn positive_scaling_is_affine_through_the_head() {
        // Histogram branch reduced to flatten so the only nonlinearities are
        // ReLUs, which commute with positive scaling when biases are zero.
        let mut net = Network::new(
            Seed(2),
            2,
            1,
            &[LayerSpec::Dense { inputs: 2, outputs: 4 }, LayerSpec::Relu],
            &[LayerSpec::Flatten],
            &[
                LayerSpec::Dense { inputs: 5, outputs: 3 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 3, outputs: 1 },
            ],
        )
        .unwrap();
        for l in net.tabular.iter_mut().chain(&mut net.head) {
            if let Some(p) = &mut l.params {
                p.weight.data_mut().iter_mut().for_each(|w| *w = w.abs());
            }
        }
        net.head[2].params.as_mut().unwrap().bias.data_mut()[0] = 0.25;
        let t = Tensor::vector(vec![0.4, 0.9]);
        let h = Tensor::vector(vec![1.0]);
        let base = net.output(&t, &h).unwrap() - 0.25;
        for c in [0.5, 2.0, 3.0] {
            let scaled_t = Tensor::vector(vec![0.4 * c, 0.9 * c]);
            let scaled_h = Tensor::vector(vec![c]);
            let out = net.output(&scaled_t, &scaled_h).unwrap();
            assert!((out - (0.25 + c * base)).abs() < 1e-12);
        }
    }
}
