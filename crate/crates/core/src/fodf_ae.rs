//! Convolutional autoencoder for 9x9x9 fODF neighbourhoods.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{extract_patch, PatchEncoder, ENCODED_SIGNAL, PATCH};
use crate::error::{Error, Result};
use crate::field::{Phantom, N_COEFFS};
use crate::nn::{
    checkpoint, Adam, BatchNorm, Binding, Conv3d, ConvTranspose3d, Mode, ParamId, ParamStore, Tape, Tensor, Var,
};

pub const LATENT_CHANNELS: usize = 32;
pub const LATENT_SIDE: usize = 3;
pub const PATCH_LEN: usize = N_COEFFS * PATCH * PATCH * PATCH;

/// Values in a patch over values in its latent code.
pub fn compression_ratio() -> f64 {
    PATCH_LEN as f64 / ENCODED_SIGNAL as f64
}

const ENCODE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeConfig {
    /// channels after the first stride-2 stage
    pub c1: usize,
    /// channels after the second stride-2 stage
    pub c2: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            c1: 64,
            c2: 64,
            lr: 1e-3,
            batch_size: 32,
            seed: 1111,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c1 == 0 || self.c2 == 0 || self.batch_size < 2 {
            return Err(Error::Config("ae: channels must be positive and batch_size at least 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("ae: lr must be positive".into()));
        }
        Ok(())
    }
}

/// Conv-BN-ReLU-Conv-BN with the input added back.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv3d,
    pub bn1: BatchNorm,
    pub conv2: Conv3d,
    pub bn2: BatchNorm,
}

impl ResBlock {
    fn new<R: Rng>(store: &mut ParamStore<f32>, name: &str, c: usize, rng: &mut R) -> Self {
        ResBlock {
            conv1: Conv3d::new(store, &format!("{name}.conv1"), c, c, 3, 1, 1, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), c),
            conv2: Conv3d::new(store, &format!("{name}.conv2"), c, c, 3, 1, 1, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), c),
        }
    }

    pub fn forward(&self, tape: &mut Tape<f32>, bind: &mut Binding<f32>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, bind, x)?;
        let h = self.bn1.forward(tape, bind, h)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, bind, h)?;
        let h = self.bn2.forward(tape, bind, h)?;
        tape.add(h, x)
    }
}

/// Convolution (or transpose), batch norm, ReLU.
#[derive(Debug, Clone)]
struct Stage<C> {
    conv: C,
    bn: BatchNorm,
    res: ResBlock,
}

#[derive(Debug, Clone)]
pub struct FodfAe {
    pub cfg: AeConfig,
    pub store: ParamStore<f32>,
    /// per-channel input standardization, fitted on the training patches
    in_mean: ParamId,
    in_std: ParamId,
    enc1: Stage<Conv3d>,
    enc2: Stage<Conv3d>,
    enc_out: Conv3d,
    dec_in: Stage<Conv3d>,
    dec1: Stage<ConvTranspose3d>,
    dec_out: ConvTranspose3d,
    adam: Adam<f32>,
    frozen: bool,
    epochs_seen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeReport {
    pub train_losses: Vec<f64>,
    pub heldout_mse: f64,
    /// MSE of predicting the mean training patch on the held-out patches
    pub baseline_mse: f64,
    pub n_train: usize,
    pub n_heldout: usize,
}

impl FodfAe {
    pub fn new(cfg: AeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut s = ParamStore::new();
        let (c0, c1, c2, cl) = (N_COEFFS, cfg.c1, cfg.c2, LATENT_CHANNELS);
        let in_mean = s.add_buffer("input.mean", Tensor::zeros(&[c0]));
        let in_std = s.add_buffer("input.std", Tensor::full(&[c0], 1.0));
        let enc1 = Stage {
            conv: Conv3d::new(&mut s, "enc1.conv", c0, c1, 3, 2, 1, &mut rng),
            bn: BatchNorm::new(&mut s, "enc1.bn", c1),
            res: ResBlock::new(&mut s, "enc1.res", c1, &mut rng),
        };
        let enc2 = Stage {
            conv: Conv3d::new(&mut s, "enc2.conv", c1, c2, 3, 2, 1, &mut rng),
            bn: BatchNorm::new(&mut s, "enc2.bn", c2),
            res: ResBlock::new(&mut s, "enc2.res", c2, &mut rng),
        };
        let enc_out = Conv3d::new(&mut s, "enc_out", c2, cl, 1, 1, 0, &mut rng);
        let dec_in = Stage {
            conv: Conv3d::new(&mut s, "dec_in.conv", cl, c2, 1, 1, 0, &mut rng),
            bn: BatchNorm::new(&mut s, "dec_in.bn", c2),
            res: ResBlock::new(&mut s, "dec_in.res", c2, &mut rng),
        };
        let dec1 = Stage {
            conv: ConvTranspose3d::new(&mut s, "dec1.conv", c2, c1, 3, 2, 1, &mut rng),
            bn: BatchNorm::new(&mut s, "dec1.bn", c1),
            res: ResBlock::new(&mut s, "dec1.res", c1, &mut rng),
        };
        let dec_out = ConvTranspose3d::new(&mut s, "dec_out", c1, c0, 3, 2, 1, &mut rng);
        Ok(FodfAe {
            adam: Adam::new(cfg.lr),
            cfg,
            store: s,
            in_mean,
            in_std,
            enc1,
            enc2,
            enc_out,
            dec_in,
            dec1,
            dec_out,
            frozen: false,
            epochs_seen: 0,
        })
    }

    pub fn n_params(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// The residual blocks, encoder first.
    pub fn res_blocks(&self) -> [&ResBlock; 4] {
        [&self.enc1.res, &self.enc2.res, &self.dec_in.res, &self.dec1.res]
    }

    fn input(&self, tape: &mut Tape<f32>, patches: &[f32], n: usize) -> Result<Var> {
        if patches.len() != n * PATCH_LEN {
            return Err(Error::shape("ae input", &[n * PATCH_LEN], &[patches.len()]));
        }
        let (m, sd) = (self.store.get(self.in_mean).data(), self.store.get(self.in_std).data());
        let mut x = patches.to_vec();
        for (k, ch) in x.chunks_mut(PATCH_LEN / N_COEFFS).enumerate() {
            let c = k % N_COEFFS;
            ch.iter_mut().for_each(|v| *v = (*v - m[c]) / sd[c]);
        }
        Ok(tape.constant(Tensor::new(vec![n, N_COEFFS, PATCH, PATCH, PATCH], x)?))
    }

    fn denormalize(&self, y: &mut [f32]) {
        let (m, sd) = (self.store.get(self.in_mean).data(), self.store.get(self.in_std).data());
        for (k, ch) in y.chunks_mut(PATCH_LEN / N_COEFFS).enumerate() {
            let c = k % N_COEFFS;
            ch.iter_mut().for_each(|v| *v = *v * sd[c] + m[c]);
        }
    }

    /// Sets the input standardization from per-channel moments of `patches`.
    pub fn fit_input_scaling(&mut self, patches: &[f32]) {
        let mut sum = [0.0f64; N_COEFFS];
        let mut sq = [0.0f64; N_COEFFS];
        let vox = PATCH_LEN / N_COEFFS;
        for (k, ch) in patches.chunks(vox).enumerate() {
            let c = k % N_COEFFS;
            for &v in ch {
                sum[c] += v as f64;
                sq[c] += (v as f64).powi(2);
            }
        }
        let count = (patches.len() / N_COEFFS).max(1) as f64;
        let mut mean = vec![0.0f32; N_COEFFS];
        let mut sd = vec![1.0f32; N_COEFFS];
        for c in 0..N_COEFFS {
            let m = sum[c] / count;
            let var = (sq[c] / count - m * m).max(0.0);
            mean[c] = m as f32;
            sd[c] = if var > 1e-12 { var.sqrt() as f32 } else { 1.0 };
        }
        self.store.get_mut(self.in_mean).data_mut().copy_from_slice(&mean);
        self.store.get_mut(self.in_std).data_mut().copy_from_slice(&sd);
    }

    /// `[N, 28, 9, 9, 9]` to `[N, 32, 3, 3, 3]`.
    pub fn encode_var(&self, tape: &mut Tape<f32>, bind: &mut Binding<f32>, x: Var) -> Result<Var> {
        let mut h = x;
        for st in [&self.enc1, &self.enc2] {
            h = st.conv.forward(tape, bind, h)?;
            h = st.bn.forward(tape, bind, h)?;
            h = tape.relu(h);
            h = st.res.forward(tape, bind, h)?;
        }
        self.enc_out.forward(tape, bind, h)
    }

    pub fn decode_var(&self, tape: &mut Tape<f32>, bind: &mut Binding<f32>, z: Var) -> Result<Var> {
        let st = &self.dec_in;
        let mut h = st.conv.forward(tape, bind, z)?;
        h = st.bn.forward(tape, bind, h)?;
        h = tape.relu(h);
        h = st.res.forward(tape, bind, h)?;
        let st = &self.dec1;
        h = st.conv.forward(tape, bind, h)?;
        h = st.bn.forward(tape, bind, h)?;
        h = tape.relu(h);
        h = st.res.forward(tape, bind, h)?;
        self.dec_out.forward(tape, bind, h)
    }

    /// Latent codes of `n` patches in eval mode, `n * 864` values.
    pub fn encode(&self, patches: &[f32], n: usize) -> Result<Vec<f32>> {
        if patches.len() != n * PATCH_LEN {
            return Err(Error::shape("ae encode", &[n * PATCH_LEN], &[patches.len()]));
        }
        let parts: Vec<Vec<f32>> = patches
            .par_chunks(ENCODE_CHUNK * PATCH_LEN)
            .map(|chunk| {
                let m = chunk.len() / PATCH_LEN;
                let mut tape = Tape::new();
                let mut bind = self.store.bind(&mut tape, false, Mode::Eval);
                let x = self.input(&mut tape, chunk, m)?;
                let z = self.encode_var(&mut tape, &mut bind, x)?;
                Ok(tape.value(z).data().to_vec())
            })
            .collect::<Result<_>>()?;
        Ok(parts.concat())
    }

    /// Reconstructions of `n` latent codes in eval mode.
    pub fn decode(&self, latents: &[f32], n: usize) -> Result<Vec<f32>> {
        if latents.len() != n * ENCODED_SIGNAL {
            return Err(Error::shape("ae decode", &[n * ENCODED_SIGNAL], &[latents.len()]));
        }
        let parts: Vec<Vec<f32>> = latents
            .par_chunks(ENCODE_CHUNK * ENCODED_SIGNAL)
            .map(|chunk| {
                let m = chunk.len() / ENCODED_SIGNAL;
                let mut tape = Tape::new();
                let mut bind = self.store.bind(&mut tape, false, Mode::Eval);
                let z = tape.constant(Tensor::new(
                    vec![m, LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE, LATENT_SIDE],
                    chunk.to_vec(),
                )?);
                let y = self.decode_var(&mut tape, &mut bind, z)?;
                let mut y = tape.value(y).data().to_vec();
                self.denormalize(&mut y);
                Ok(y)
            })
            .collect::<Result<_>>()?;
        Ok(parts.concat())
    }

    /// Mean squared reconstruction error over `n` patches in input units.
    pub fn reconstruction_mse(&self, patches: &[f32], n: usize) -> Result<f64> {
        let z = self.encode(patches, n)?;
        let y = self.decode(&z, n)?;
        Ok(mse(&y, patches))
    }

    fn train_batch(&mut self, patches: &[f32], n: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let seed = self.cfg.seed ^ self.adam.steps();
        let mut bind = self.store.bind(&mut tape, true, Mode::Train { seed });
        let x = self.input(&mut tape, patches, n)?;
        let z = self.encode_var(&mut tape, &mut bind, x)?;
        let y = self.decode_var(&mut tape, &mut bind, z)?;
        let loss = tape.mse(y, x)?;
        let lv = tape.value(loss).data()[0] as f64;
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("autoencoder loss is {lv}")));
        }
        let mut grads = tape.backward(loss)?;
        let g = bind.grads(&mut grads);
        self.adam.step(&mut self.store, &g)?;
        self.store.apply_bn_updates(&mut bind);
        Ok(lv)
    }

    /// One pass over `n` patches in shuffled mini-batches; returns the mean loss.
    pub fn train_epoch(&mut self, patches: &[f32], n: usize) -> Result<f64> {
        if self.frozen {
            return Err(Error::InvalidArgument("autoencoder is frozen".into()));
        }
        if n < 2 || patches.len() != n * PATCH_LEN {
            return Err(Error::InvalidArgument("autoencoder training needs at least 2 patches".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(self.epochs_seen as u64 + 1));
        order.shuffle(&mut rng);
        let bs = self.cfg.batch_size;
        let mut total = 0.0;
        let mut buf = Vec::with_capacity(bs * PATCH_LEN);
        let mut k = 0;
        while k < n {
            // a lone trailing patch joins the previous batch: batch norm needs two
            let mut end = (k + bs).min(n);
            if n - end == 1 {
                end = n;
            }
            buf.clear();
            for &i in &order[k..end] {
                buf.extend_from_slice(&patches[i * PATCH_LEN..(i + 1) * PATCH_LEN]);
            }
            total += self.train_batch(&buf, end - k)? * (end - k) as f64;
            k = end;
        }
        self.epochs_seen += 1;
        Ok(total / n as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_store(path, &self.store)?;
        let cfg = serde_json::to_string_pretty(&self.cfg).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(sidecar(path), cfg)?;
        Ok(())
    }

    /// Loads a frozen encoder.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(sidecar(path))?;
        let cfg: AeConfig = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let mut ae = FodfAe::new(cfg)?;
        checkpoint::load_store(path, &mut ae.store)?;
        ae.frozen = true;
        Ok(ae)
    }
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len().max(1) as f64
}

impl PatchEncoder for FodfAe {
    fn encode_patches(&self, patches: &[f32], n: usize) -> Result<Vec<f32>> {
        self.encode(patches, n)
    }
}

/// The patch around voxel `c`, which must lie in the tracking mask.
pub fn patch_at(phantom: &Phantom, c: [i64; 3]) -> Result<Vec<f32>> {
    if !phantom.tracking_mask.contains_voxel(c) {
        return Err(Error::InvalidArgument(format!("patch centre {c:?} is outside the tracking mask")));
    }
    Ok(extract_patch(phantom, c))
}

/// `n` patches centred on mask voxels drawn uniformly with replacement.
pub fn sample_patches<R: Rng>(phantom: &Phantom, n: usize, rng: &mut R) -> Result<Vec<f32>> {
    let voxels = phantom.tracking_mask.voxels();
    if voxels.is_empty() {
        return Err(Error::Empty("tracking mask is empty".into()));
    }
    let centres: Vec<[i64; 3]> = (0..n)
        .map(|_| {
            let v = voxels[rng.gen_range(0..voxels.len())];
            [v[0] as i64, v[1] as i64, v[2] as i64]
        })
        .collect();
    let parts: Vec<Vec<f32>> = centres.par_iter().map(|&c| extract_patch(phantom, c)).collect();
    Ok(parts.concat())
}

/// Samples `n_patches` in-mask patches, holds out a tenth, trains for
/// `epochs`, and freezes the network.
pub fn train_ae(ae: &mut FodfAe, phantom: &Phantom, n_patches: usize, epochs: usize) -> Result<AeReport> {
    if n_patches < 4 {
        return Err(Error::InvalidArgument("need at least 4 patches".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ae.cfg.seed);
    let all = sample_patches(phantom, n_patches, &mut rng)?;
    let n_held = (n_patches / 10).max(1);
    let n_train = n_patches - n_held;
    let (train, held) = all.split_at(n_train * PATCH_LEN);
    if ae.epochs_seen == 0 {
        ae.fit_input_scaling(train);
    }
    let mut train_losses = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let loss = ae.train_epoch(train, n_train)?;
        log::info!("autoencoder epoch {e}: loss {loss:.6}");
        train_losses.push(loss);
    }
    let mut mean = vec![0.0f64; PATCH_LEN];
    for p in train.chunks(PATCH_LEN) {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v as f64;
        }
    }
    let mean: Vec<f32> = mean.iter().map(|m| (m / n_train as f64) as f32).collect();
    let baseline: Vec<f32> = mean.iter().copied().cycle().take(held.len()).collect();
    let report = AeReport {
        train_losses,
        heldout_mse: ae.reconstruction_mse(held, n_held)?,
        baseline_mse: mse(&baseline, held),
        n_train,
        n_heldout: n_held,
    };
    ae.freeze();
    Ok(report)
}
