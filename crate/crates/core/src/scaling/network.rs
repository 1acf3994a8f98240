use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BlockKind, ScaledArch};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{ConvLayer, Head, MbConv, ResidualBlock, ResidualConfig};
use crate::tensor::{
    check_gradients_at, projection_loss, Evaluation, GradCheckReport, ParamId, ParamStore, Real, Tape, Tensor, Var,
    GRAD_CHECK_RETRIES,
};

#[derive(Clone, Debug)]
pub enum Block {
    /// Convolution then ReLU.
    Conv(ConvLayer),
    Mbconv(MbConv),
    Residual(ResidualBlock),
}

impl Block {
    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        match self {
            Block::Conv(c) => {
                let y = c.forward(tape, store, x)?;
                Ok(tape.relu(y))
            }
            Block::Mbconv(b) => b.forward(tape, store, x),
            Block::Residual(b) => b.forward(tape, store, x),
        }
    }
}

/// Parameters plus the block structure of an architecture. The structure
/// only holds parameter ids, so a network can be re-typed with [`Network::cast`].
#[derive(Clone, Debug)]
pub struct Network<T: Real = f32> {
    pub arch: ScaledArch,
    pub store: ParamStore<T>,
    groups: Vec<(String, Vec<Block>)>,
    head: Head,
}

/// He-initialized network for `arch`.
pub fn build_network<T: Real, R: Rng + ?Sized>(arch: &ScaledArch, rng: &mut R) -> Result<Network<T>> {
    Network::new(arch, rng)
}

impl<T: Real> Network<T> {
    pub fn new<R: Rng + ?Sized>(arch: &ScaledArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let mut groups = Vec::new();
        let mut c_in = 3;
        for (name, s) in arch.groups() {
            let mut blocks = Vec::with_capacity(s.layers);
            for j in 0..s.layers {
                let block_name = format!("{name}.{j}");
                let block = match s.kind {
                    BlockKind::Conv => {
                        let stride = if j == 0 { s.stride } else { 1 };
                        let cin = if j == 0 { c_in } else { s.channels };
                        Block::Conv(ConvLayer::new(&mut store, &block_name, s.kernel, cin, s.channels, stride, rng)?)
                    }
                    BlockKind::Mbconv => {
                        Block::Mbconv(MbConv::new(&mut store, &block_name, arch.mbconv_config(&s, c_in, j), rng)?)
                    }
                    BlockKind::Residual => Block::Residual(ResidualBlock::new(
                        &mut store,
                        &block_name,
                        ResidualConfig {
                            channels: s.channels,
                            kernel_size: s.kernel,
                        },
                        rng,
                    )?),
                };
                blocks.push(block);
            }
            c_in = s.channels;
            groups.push((name, blocks));
        }
        let head = Head::new(&mut store, "head", c_in, arch.head, rng)?;
        Ok(Network {
            arch: arch.clone(),
            store,
            groups,
            head,
        })
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            store: self.store.cast(),
            groups: self.groups.clone(),
            head: self.head.clone(),
        }
    }

    /// Names of the tappable intermediate outputs, in order.
    pub fn layer_names(&self) -> Vec<String> {
        self.groups.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// `[N, H, W, 3] -> [N, outputs]`. Each group's output is pushed onto
    /// `taps` when given.
    pub fn forward_tapped<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        training: bool,
        rng: &mut R,
        mut taps: Option<&mut Vec<(String, Var)>>,
    ) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[3] != 3 {
            return Err(shape_err!("network input must be [N, H, W, 3], got {shape:?}"));
        }
        let mut h = x;
        for (name, blocks) in &self.groups {
            for b in blocks {
                h = b.forward(tape, &self.store, h)?;
            }
            if let Some(t) = taps.as_deref_mut() {
                t.push((name.clone(), h));
            }
        }
        self.head.forward(tape, &self.store, h, training, rng)
    }

    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape<T>, x: Var, training: bool, rng: &mut R) -> Result<Var> {
        self.forward_tapped(tape, x, training, rng, None)
    }

    /// Inference over a batch of images.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone());
        // Dropout is off in inference, so the RNG is never drawn from.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = self.forward(&mut tape, x, false, &mut rng)?;
        Ok(tape.value(y).clone())
    }

    /// Forward pass returning the named intermediate activations.
    pub fn activations(&self, images: &Tensor<T>, names: &[String]) -> Result<Vec<(String, Tensor<T>)>> {
        let available = self.layer_names();
        if let Some(bad) = names.iter().find(|n| !available.contains(n)) {
            return Err(invalid!("unknown layer {bad:?}; available: {}", available.join(", ")));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone());
        let mut taps = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.forward_tapped(&mut tape, x, false, &mut rng, Some(&mut taps))?;
        Ok(names
            .iter()
            .map(|n| {
                let v = taps.iter().find(|(t, _)| t == n).expect("checked above").1;
                (n.clone(), tape.value(v).clone())
            })
            .collect())
    }
}

/// Finite-difference check of a whole network in precision `T`, in
/// inference mode. Every input pixel is checked, plus up to
/// `per_tensor` seeded coordinates of each parameter tensor. Coordinates
/// whose perturbation crosses a ReLU kink are skipped; if more than 2% are
/// skipped the input images are redrawn.
pub fn check_network_gradients<T: Real>(
    net: &Network<f32>,
    batch: usize,
    side: usize,
    per_tensor: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template: Network<T> = net.cast();
    let ids: Vec<ParamId> = template.store.ids().collect();
    let params: Vec<Tensor<f64>> = ids.iter().map(|&id| template.store.get(id).value.cast()).collect();
    let mut coords = Vec::new();
    for (k, p) in params.iter().enumerate() {
        let mut picks: Vec<usize> = (0..p.len()).collect();
        picks.shuffle(&mut rng);
        picks.truncate(per_tensor);
        picks.sort_unstable();
        coords.extend(picks.into_iter().map(|j| (k + 1, j)));
    }
    let n_pixels = batch * side * side * 3;
    let mut report = None;
    for attempt in 0..=GRAD_CHECK_RETRIES {
        let image = Tensor::<f64>::from_fn(vec![batch, side, side, 3], |_| T::lit(rng.random::<f64>()).as_f64())?;
        let mut inputs = vec![image];
        inputs.extend(params.iter().cloned());
        let mut all = (0..n_pixels).map(|j| (0, j)).collect::<Vec<_>>();
        all.extend(&coords);
        let mut work = template.clone();
        let r = check_gradients_at::<T, _>(&inputs, &all, eps, |xs, want_grads| {
            for (&id, v) in ids.iter().zip(&xs[1..]) {
                work.store.set_value(id, v.cast())?;
            }
            work.store.zero_grad();
            let mut tape = Tape::<T>::new();
            let x = tape.leaf(xs[0].cast());
            let y = work.forward(&mut tape, x, false, &mut ChaCha8Rng::seed_from_u64(0))?;
            let loss = projection_loss(&mut tape, y, seed)?;
            let mut grads = Vec::new();
            if want_grads {
                let g = tape.backward_into(loss, &mut work.store)?;
                grads.push(g.get(x).map_or_else(|| Tensor::zeros(xs[0].shape().to_vec()), |t| Ok(t.cast()))?);
                grads.extend(ids.iter().map(|&id| work.store.get(id).grad.cast()));
            }
            Ok(Evaluation {
                loss: tape.value(loss).item()?.as_f64(),
                grads,
                fingerprint: tape.kink_fingerprint(),
            })
        })?;
        let done = r.skipped * 50 <= all.len();
        report = Some(GradCheckReport { resamples: attempt, ..r });
        if done {
            break;
        }
    }
    Ok(report.expect("at least one attempt"))
}
