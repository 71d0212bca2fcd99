use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{decay_aggregate, decay_weights, ModuleSplit, ProxyId, ProxyOptions, ProxyScore};
use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::linalg::{nuclear_norm, psd_logdet, row_corrcoef, sym_eigenvalues};
use crate::model::{LayerKind, NetworkInstance};
use crate::search_space::flops_estimate;
use crate::tensor::{Reduction, Tensor};

/// Cross-entropy pass on the scoring batch with activation statistics.
struct BasePass {
    grads: Vec<Tensor>,
    fisher: Vec<f64>,
    zicopp: Vec<f64>,
    zicopp_degenerate: bool,
    /// Per-block `B x B` agreement counts of GELU input signs.
    kernels: Vec<Vec<f64>>,
    activations: Option<Vec<Tensor>>,
}

/// Single all-ones sample pass with `R = sum(logits)`.
struct OnesPass {
    params: Vec<Tensor>,
    grads: Vec<Tensor>,
}

/// Scores proxies on one network, sharing passes between scorers.
pub struct ProxySession<'a> {
    net: &'a NetworkInstance,
    batch: &'a TokenBatch,
    opts: &'a ProxyOptions,
    kinds: Vec<LayerKind>,
    keep_activations: bool,
    base: Option<BasePass>,
    ones: Option<OnesPass>,
    base_time: Duration,
    ones_time: Duration,
}

fn scorer_err(id: ProxyId, detail: impl Into<String>) -> Error {
    Error::Scorer {
        proxy: id.name().into(),
        detail: detail.into(),
    }
}

/// Per-sample, per-channel sums over tokens of `z * g`, as `[B][C]`.
fn channel_products(z: &Tensor, g: &Tensor) -> (usize, usize, Vec<f64>) {
    let s = z.shape();
    let b = s[0];
    let c = *s.last().expect("activation rank >= 2");
    let per_sample = z.len() / b;
    let mut q = vec![0.0; b * c];
    for (si, (zs, gs)) in z.data().chunks(per_sample).zip(g.data().chunks(per_sample)).enumerate() {
        let row = &mut q[si * c..(si + 1) * c];
        for (zt, gt) in zs.chunks(c).zip(gs.chunks(c)) {
            for ((r, zv), gv) in row.iter_mut().zip(zt).zip(gt) {
                *r += zv * gv;
            }
        }
    }
    (b, c, q)
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}

fn global_norm(ts: &[Tensor]) -> f64 {
    ts.iter().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

impl<'a> ProxySession<'a> {
    pub fn new(net: &'a NetworkInstance, batch: &'a TokenBatch, opts: &'a ProxyOptions) -> Result<Self> {
        opts.validate()?;
        let geom = net.geometry();
        let s = batch.data().shape();
        if s[1] != geom.tokens || s[2] != geom.token_width {
            return Err(Error::dim(
                "score",
                format!(
                    "batch {s:?} does not match network geometry [B, {}, {}]",
                    geom.tokens, geom.token_width
                ),
            ));
        }
        if batch.num_classes() != geom.num_classes {
            return Err(Error::Config(format!(
                "batch has {} classes, network {}",
                batch.num_classes(),
                geom.num_classes
            )));
        }
        Ok(ProxySession {
            net,
            batch,
            opts,
            kinds: net.layer_registry().iter().map(|e| e.kind).collect(),
            keep_activations: false,
            base: None,
            ones: None,
            base_time: Duration::ZERO,
            ones_time: Duration::ZERO,
        })
    }

    /// Prepares shared passes for the given proxy set (CRoZe needs the clean
    /// activations kept).
    pub fn plan(mut self, proxies: &[ProxyId]) -> Self {
        self.keep_activations |= proxies.contains(&ProxyId::Croze);
        self
    }

    /// Wall time of the shared passes `id` depends on (zero before they ran).
    pub fn shared_time(&self, id: ProxyId) -> Duration {
        match id {
            ProxyId::GradNorm
            | ProxyId::Snip
            | ProxyId::Grasp
            | ProxyId::Fisher
            | ProxyId::Naswot
            | ProxyId::Tcet
            | ProxyId::Croze
            | ProxyId::ZicoPp => self.base_time,
            ProxyId::Synflow | ProxyId::LogSynflow | ProxyId::Dss => self.ones_time,
            ProxyId::Flops | ProxyId::JacobCov | ProxyId::Zico => Duration::ZERO,
        }
    }

    pub fn score(&mut self, id: ProxyId) -> Result<ProxyScore> {
        let out = match id {
            ProxyId::Flops => Ok(ProxyScore::plain(
                flops_estimate(self.net.genotype(), self.net.geometry()) as f64,
            )),
            ProxyId::GradNorm => self.gradnorm(),
            ProxyId::Snip => self.snip(),
            ProxyId::Grasp => self.grasp(),
            ProxyId::Synflow => self.synflow(),
            ProxyId::LogSynflow => self.logsynflow(),
            ProxyId::Fisher => self.fisher(),
            ProxyId::JacobCov => self.jacobcov(),
            ProxyId::Naswot => self.naswot(),
            ProxyId::Dss => self.dss(),
            ProxyId::Croze => self.croze(),
            ProxyId::Tcet => self.tcet(),
            ProxyId::Zico => self.zico(),
            ProxyId::ZicoPp => self.zicopp(),
        };
        let score = out.map_err(|e| match e {
            Error::Scorer { .. } => e,
            other => scorer_err(id, other.to_string()),
        })?;
        if !score.value.is_finite() {
            return Err(scorer_err(id, format!("non-finite score {}", score.value)));
        }
        Ok(score)
    }

    pub fn module_split(&mut self, id: ProxyId) -> Result<ModuleSplit> {
        if !id.is_splittable() {
            return Err(Error::Config(format!("{id} has no module split")));
        }
        let s = self.score(id)?;
        let layers = s.layers.expect("splittable scorers are layer-additive");
        Ok(ModuleSplit::from_layers(&self.kinds, &layers))
    }

    fn layer_sum(&self, f: impl Fn(usize) -> f64) -> Vec<f64> {
        self.net
            .layer_registry()
            .iter()
            .map(|e| e.params.iter().map(|&p| f(p)).sum())
            .collect()
    }

    fn base(&mut self) -> Result<&BasePass> {
        if self.base.is_none() {
            let t = Instant::now();
            let pass = self.run_base()?;
            self.base_time = t.elapsed();
            self.base = Some(pass);
        }
        Ok(self.base.as_ref().expect("just computed"))
    }

    fn run_base(&self) -> Result<BasePass> {
        let mut fp = self.net.forward(self.batch)?;
        let loss = fp.cross_entropy(self.batch.labels(), Reduction::Mean)?;
        let mut grads = fp.graph.backward(loss, &fp.activations)?;
        let b = self.batch.batch_size();
        let eps = self.opts.variance_eps;

        let mut fisher = Vec::with_capacity(fp.activations.len());
        let mut zicopp = Vec::with_capacity(fp.activations.len());
        let mut zicopp_degenerate = false;
        for (entry, &node) in self.net.layer_registry().iter().zip(&fp.activations) {
            let z = fp.graph.value(node);
            let g = grads.take(node).expect("retained activation");
            let (_, c, q) = channel_products(z, &g);
            let mut f = 0.0;
            let mut zsum = 0.0;
            let mut col = vec![0.0; b];
            for ch in 0..c {
                for (s, slot) in col.iter_mut().enumerate() {
                    *slot = q[s * c + ch];
                }
                f += 0.5 * col.iter().map(|v| v * v).sum::<f64>() / b as f64;
                // Per-sample loss gradients are B times the mean-loss ones.
                let sq: Vec<f64> = col.iter().map(|v| (v * b as f64).powi(2)).collect();
                let (m, var) = mean_var(&sq);
                zsum += m / (var + eps).sqrt();
            }
            if !f.is_finite() || !zsum.is_finite() {
                return Err(Error::Scorer {
                    proxy: "activation statistics".into(),
                    detail: format!("non-finite value at layer {} ({:?})", entry.index, entry.kind),
                });
            }
            if zsum <= 0.0 {
                zicopp_degenerate = true;
            }
            fisher.push(f);
            zicopp.push(zsum.max(eps).ln());
        }

        let mut kernels = Vec::with_capacity(fp.gelu_inputs.len());
        for &node in &fp.gelu_inputs {
            let x = fp.graph.value(node);
            let per = x.len() / b;
            let words = per.div_ceil(64);
            let mut bits = vec![0u64; b * words];
            for (s, row) in x.data().chunks(per).enumerate() {
                for (i, &v) in row.iter().enumerate() {
                    if v > 0.0 {
                        bits[s * words + i / 64] |= 1 << (i % 64);
                    }
                }
            }
            let mut k = vec![0.0; b * b];
            for i in 0..b {
                for j in i..b {
                    let ham: u32 = bits[i * words..(i + 1) * words]
                        .iter()
                        .zip(&bits[j * words..(j + 1) * words])
                        .map(|(a, c)| (a ^ c).count_ones())
                        .sum();
                    let agree = (per as u32 - ham) as f64;
                    k[i * b + j] = agree;
                    k[j * b + i] = agree;
                }
            }
            kernels.push(k);
        }

        let activations = self
            .keep_activations
            .then(|| fp.activations.iter().map(|&n| fp.graph.value(n).clone()).collect());
        let param_grads = fp.param_grads(&mut grads);
        Ok(BasePass {
            grads: param_grads,
            fisher,
            zicopp,
            zicopp_degenerate,
            kernels,
            activations,
        })
    }

    fn ones(&mut self) -> Result<&OnesPass> {
        if self.ones.is_none() {
            let t = Instant::now();
            let params: Vec<Tensor> = if self.opts.sign_removal {
                self.net.param_values()
            } else {
                self.net.params().iter().map(|p| p.value.map(f64::abs)).collect()
            };
            let g = self.net.geometry();
            let input = Tensor::ones(&[1, g.tokens, g.token_width]);
            let mut fp = self.net.forward_with(Some(&params), &input, false)?;
            let r = fp.logit_sum()?;
            let mut grads = fp.graph.backward(r, &[])?;
            let grads = fp.param_grads(&mut grads);
            self.ones_time = t.elapsed();
            self.ones = Some(OnesPass { params, grads });
        }
        Ok(self.ones.as_ref().expect("just computed"))
    }

    fn gradnorm(&mut self) -> Result<ProxyScore> {
        self.base()?;
        let base = self.base.as_ref().expect("computed");
        let sq = |p: usize| base.grads[p].data().iter().map(|v| v * v).sum::<f64>();
        let layers = self.layer_sum(sq).into_iter().map(f64::sqrt).collect();
        Ok(ProxyScore::additive(layers))
    }

    fn snip_layers(&mut self) -> Result<Vec<f64>> {
        self.base()?;
        let base = self.base.as_ref().expect("computed");
        let params = self.net.params();
        Ok(self.layer_sum(|p| {
            params[p].value.data().iter().zip(base.grads[p].data()).map(|(w, g)| (w * g).abs()).sum()
        }))
    }

    fn snip(&mut self) -> Result<ProxyScore> {
        Ok(ProxyScore::additive(self.snip_layers()?))
    }

    fn grasp(&mut self) -> Result<ProxyScore> {
        self.base()?;
        let v = &self.base.as_ref().expect("computed").grads;
        let theta = self.net.param_values();
        let (nt, nv) = (global_norm(&theta), global_norm(v));
        let h = self.opts.grasp_step * nt / nv;
        if nv == 0.0 || h == 0.0 {
            let mut s = ProxyScore::additive(vec![0.0; self.kinds.len()]);
            s.degenerate = true;
            return Ok(s);
        }
        let shifted = |sign: f64| -> Result<Vec<Tensor>> {
            let ps: Vec<Tensor> = theta
                .iter()
                .zip(v)
                .map(|(t, g)| {
                    let data = t.data().iter().zip(g.data()).map(|(a, b)| a + sign * h * b).collect();
                    Tensor::new(t.shape().to_vec(), data).expect("same shape")
                })
                .collect();
            let mut fp = self.net.forward_with(Some(&ps), self.batch.data(), false)?;
            let loss = fp.cross_entropy(self.batch.labels(), Reduction::Mean)?;
            let mut gr = fp.graph.backward(loss, &[])?;
            Ok(fp.param_grads(&mut gr))
        };
        let up = shifted(1.0)?;
        let down = shifted(-1.0)?;
        let layers = self.layer_sum(|p| {
            theta[p]
                .data()
                .iter()
                .zip(up[p].data().iter().zip(down[p].data()))
                .map(|(w, (u, d))| -((u - d) / (2.0 * h)) * w)
                .sum()
        });
        Ok(ProxyScore::additive(layers))
    }

    fn synflow_layers(&mut self) -> Result<Vec<f64>> {
        self.ones()?;
        let o = self.ones.as_ref().expect("computed");
        Ok(self.layer_sum(|p| {
            o.params[p].data().iter().zip(o.grads[p].data()).map(|(w, g)| (w * g).abs()).sum()
        }))
    }

    fn synflow(&mut self) -> Result<ProxyScore> {
        Ok(ProxyScore::additive(self.synflow_layers()?))
    }

    fn logsynflow(&mut self) -> Result<ProxyScore> {
        self.ones()?;
        let o = self.ones.as_ref().expect("computed");
        let layers = self.layer_sum(|p| {
            o.params[p].data().iter().zip(o.grads[p].data()).map(|(w, g)| w.abs() * (g.abs() + 1.0).ln()).sum()
        });
        Ok(ProxyScore::additive(layers))
    }

    fn dss(&mut self) -> Result<ProxyScore> {
        self.ones()?;
        let o = self.ones.as_ref().expect("computed");
        let layers = self
            .net
            .layer_registry()
            .iter()
            .map(|e| {
                e.params
                    .iter()
                    .map(|&p| {
                        let (w, g) = (&o.params[p], &o.grads[p]);
                        if e.kind.is_msa() && w.rank() == 2 {
                            let (r, c) = (w.shape()[0], w.shape()[1]);
                            nuclear_norm(r, c, g.data()) * nuclear_norm(r, c, w.data())
                        } else if e.kind.is_mlp() {
                            w.data().iter().zip(g.data()).map(|(a, b)| (a * b).abs()).sum()
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect();
        Ok(ProxyScore::additive(layers))
    }

    fn fisher(&mut self) -> Result<ProxyScore> {
        Ok(ProxyScore::additive(self.base()?.fisher.clone()))
    }

    fn jacobcov(&mut self) -> Result<ProxyScore> {
        let mut fp = self.net.forward_with(None, self.batch.data(), true)?;
        let r = fp.logit_sum()?;
        let grads = fp.graph.backward(r, &[])?;
        let j = grads.get(fp.input).expect("input requires grad");
        let b = self.batch.batch_size();
        let cols = j.len() / b;
        let mut corr = row_corrcoef(b, cols, j.data());
        let mut degenerate = false;
        for i in 0..b {
            for k in 0..b {
                let v = &mut corr[i * b + k];
                if !v.is_finite() {
                    degenerate = true;
                    *v = if i == k { 1.0 } else { 0.0 };
                }
            }
        }
        let k = self.opts.jacob_k;
        let value = -sym_eigenvalues(b, &corr)
            .iter()
            .map(|&s| (s + k).ln() + 1.0 / (s + k))
            .sum::<f64>();
        Ok(ProxyScore {
            value,
            degenerate,
            layers: None,
        })
    }

    fn naswot(&mut self) -> Result<ProxyScore> {
        let b = self.batch.batch_size();
        let jitter = self.opts.kernel_jitter;
        let base = self.base()?;
        let mut total = vec![0.0; b * b];
        for k in &base.kernels {
            total.iter_mut().zip(k).for_each(|(t, v)| *t += v);
        }
        let (value, degenerate) = psd_logdet(b, &total, jitter);
        Ok(ProxyScore {
            value,
            degenerate,
            layers: None,
        })
    }

    fn tcet(&mut self) -> Result<ProxyScore> {
        let snip = self.snip_layers()?;
        let b = self.batch.batch_size();
        let jitter = self.opts.kernel_jitter;
        let base = self.base.as_ref().expect("computed by snip");
        let fc1: Vec<usize> = self
            .kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == LayerKind::MlpFc1)
            .map(|(i, _)| i)
            .collect();
        let mut degenerate = false;
        let mut value = 0.0;
        for (k, &layer) in base.kernels.iter().zip(&fc1) {
            let (ld, def) = psd_logdet(b, k, jitter);
            degenerate |= def;
            value += ld * snip[layer].ln_1p();
        }
        Ok(ProxyScore {
            value,
            degenerate,
            layers: None,
        })
    }

    fn croze(&mut self) -> Result<ProxyScore> {
        if !self.keep_activations {
            self.keep_activations = true;
            self.base = None;
        }
        self.base()?;
        let base = self.base.as_ref().expect("computed");
        let clean_acts = base.activations.as_ref().expect("activations kept");
        let lr = self.opts.croze_lr;
        let theta: Vec<Tensor> = self
            .net
            .params()
            .iter()
            .zip(&base.grads)
            .map(|(p, g)| {
                let data = p.value.data().iter().zip(g.data()).map(|(w, d)| w - lr * d).collect();
                Tensor::new(p.value.shape().to_vec(), data).expect("same shape")
            })
            .collect();
        let x = self.batch.data();
        let (_, var) = mean_var(x.data());
        let noise_std = self.opts.croze_noise * var.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.croze_seed);
        let x_noisy = if noise_std > 0.0 {
            let normal = Normal::new(0.0, noise_std).map_err(|e| Error::Config(e.to_string()))?;
            x.data().iter().map(|v| v + normal.sample(&mut rng)).collect()
        } else {
            x.data().to_vec()
        };
        let x_noisy = Tensor::new(x.shape().to_vec(), x_noisy)?;
        let mut fp = self.net.forward_with(Some(&theta), &x_noisy, false)?;
        let loss = fp.cross_entropy(self.batch.labels(), Reduction::Mean)?;
        let mut grads = fp.graph.backward(loss, &[])?;
        let pert_grads = fp.param_grads(&mut grads);

        let mut degenerate = false;
        let mut total = 0.0;
        for (i, entry) in self.net.layer_registry().iter().enumerate() {
            let act = cosine(clean_acts[i].data(), fp.graph.value(fp.activations[i]).data());
            let flat = |gs: &[Tensor]| -> Vec<f64> {
                entry.params.iter().flat_map(|&p| gs[p].data().iter().copied()).collect()
            };
            let grad = cosine(&flat(&base.grads), &flat(&pert_grads));
            degenerate |= act.is_none() || grad.is_none();
            total += act.unwrap_or(0.0) + grad.unwrap_or(0.0);
        }
        Ok(ProxyScore {
            value: total / self.kinds.len() as f64,
            degenerate,
            layers: None,
        })
    }

    fn zico(&mut self) -> Result<ProxyScore> {
        let n = self.batch.batch_size();
        let params = self.net.params();
        let mut abs_sum: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let mut mean: Vec<Vec<f64>> = abs_sum.clone();
        let mut m2: Vec<Vec<f64>> = abs_sum.clone();
        for s in 0..n {
            let sample = self.batch.sample(s);
            let mut fp = self.net.forward(&sample)?;
            let loss = fp.cross_entropy(sample.labels(), Reduction::Mean)?;
            let mut grads = fp.graph.backward(loss, &[])?;
            let grads = fp.param_grads(&mut grads);
            let k = (s + 1) as f64;
            for (p, g) in grads.iter().enumerate() {
                for (i, &v) in g.data().iter().enumerate() {
                    abs_sum[p][i] += v.abs();
                    let d = v - mean[p][i];
                    mean[p][i] += d / k;
                    m2[p][i] += d * (v - mean[p][i]);
                }
            }
        }
        let eps = self.opts.variance_eps;
        let mut degenerate = false;
        let mut layers = Vec::with_capacity(self.kinds.len());
        for e in self.net.layer_registry() {
            let sum: f64 = e
                .params
                .iter()
                .map(|&p| {
                    abs_sum[p]
                        .iter()
                        .zip(&m2[p])
                        .map(|(a, q)| (a / n as f64) / (q / n as f64 + eps).sqrt())
                        .sum::<f64>()
                })
                .sum();
            if !sum.is_finite() {
                return Err(scorer_err(
                    ProxyId::Zico,
                    format!("non-finite statistic at layer {} ({:?})", e.index, e.kind),
                ));
            }
            if sum <= 0.0 {
                degenerate = true;
            }
            layers.push(sum.max(eps).ln());
        }
        let mut s = ProxyScore::additive(layers);
        s.degenerate = degenerate;
        Ok(s)
    }

    fn zicopp(&mut self) -> Result<ProxyScore> {
        let n = self.opts.decay_start;
        let base = self.base()?;
        let weighted = decay_weights(base.zicopp.len(), n)
            .iter()
            .zip(&base.zicopp)
            .map(|(w, s)| w * s)
            .collect();
        Ok(ProxyScore {
            value: decay_aggregate(&base.zicopp, n),
            degenerate: base.zicopp_degenerate,
            layers: Some(weighted),
        })
    }
}
