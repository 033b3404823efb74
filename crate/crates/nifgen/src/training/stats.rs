//! Per-channel latent statistics. Accumulation is streaming sum /
//! sum-of-squares in f64, so the result is independent of dataset order (up
//! to float addition reordering) and never materializes the latents.

use candle_core::{DType, Device, Tensor};

use crate::autoencoder::Encoder;
use crate::error::{Error, Result};
use crate::flowmatch::LatentStats;
use crate::training::dataset::Dataset;

/// Streaming moment accumulator over `(C, H, W)` latents; spatial sizes may
/// vary between pushes, channel count may not.
pub struct LatentAccumulator {
    sums: Vec<f64>,
    sumsqs: Vec<f64>,
    count: u64,
}

impl LatentAccumulator {
    pub fn new(channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("latent statistics need at least one channel".into()));
        }
        Ok(Self { sums: vec![0.0; channels], sumsqs: vec![0.0; channels], count: 0 })
    }

    pub fn push(&mut self, latent: &Tensor) -> Result<()> {
        let (c, h, w) = latent.dims3()?;
        if c != self.sums.len() {
            return Err(Error::Shape(format!(
                "latent has {c} channels, accumulator was built for {}",
                self.sums.len()
            )));
        }
        let wide = latent.to_dtype(DType::F64)?;
        let sums = wide.sum((1, 2))?.to_vec1::<f64>()?;
        let sumsqs = wide.sqr()?.sum((1, 2))?.to_vec1::<f64>()?;
        for ch in 0..c {
            if !(sums[ch].is_finite() && sumsqs[ch].is_finite()) {
                return Err(Error::NonFinite(format!("latent channel {ch} while accumulating stats")));
            }
            self.sums[ch] += sums[ch];
            self.sumsqs[ch] += sumsqs[ch];
        }
        self.count += (h * w) as u64;
        Ok(())
    }

    pub fn samples(&self) -> u64 {
        self.count
    }

    /// Population mean and standard deviation per channel.
    pub fn finish(self) -> Result<LatentStats> {
        if self.count == 0 {
            return Err(Error::Config("no latents accumulated".into()));
        }
        let n = self.count as f64;
        let mu: Vec<f64> = self.sums.iter().map(|s| s / n).collect();
        let sigma: Vec<f64> = self
            .sumsqs
            .iter()
            .zip(&mu)
            .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt())
            .collect();
        Ok(LatentStats { mu, sigma })
    }
}

/// Encode every `stride`-th image and accumulate channel statistics over
/// all latent positions. `stride = 1` uses the full dataset.
pub fn compute_latent_stats(
    dataset: &dyn Dataset,
    encoder: &Encoder,
    device: &Device,
    stride: usize,
) -> Result<LatentStats> {
    if stride == 0 {
        return Err(Error::Config("stats stride must be positive".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Config("cannot compute latent statistics over an empty dataset".into()));
    }
    let mut acc = LatentAccumulator::new(encoder.config().channels)?;
    for index in (0..dataset.len()).step_by(stride) {
        let sample = dataset.get(index, device)?;
        let latent = encoder.encode(&sample.image)?;
        acc.push(&latent.tensor().detach())?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::EncoderConfig;
    use crate::flowmatch::gaussian_tensor;
    use crate::params::ParamStore;
    use crate::rng::{stream_rng, Stream};
    use crate::training::dataset::{Sample, SyntheticShapes};

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn hand_case_one_and_three() {
        let mut acc = LatentAccumulator::new(1).unwrap();
        acc.push(&Tensor::full(1f32, (1, 1, 1), &dev()).unwrap()).unwrap();
        acc.push(&Tensor::full(3f32, (1, 1, 1), &dev()).unwrap()).unwrap();
        let stats = acc.finish().unwrap();
        assert_eq!(stats.mu, vec![2.0]);
        assert_eq!(stats.sigma, vec![1.0]);
    }

    #[test]
    fn constant_latent_gives_zero_sigma_floored_downstream() {
        let mut acc = LatentAccumulator::new(2).unwrap();
        acc.push(&Tensor::full(0.7f32, (2, 3, 3), &dev()).unwrap()).unwrap();
        let stats = acc.finish().unwrap();
        assert!(stats.sigma.iter().all(|s| *s == 0.0));
        // The floor lives in normalize/denormalize, not in the statistics.
        let z = Tensor::full(0.7f32, (2, 3, 3), &dev()).unwrap();
        let n = stats.normalize(&z).unwrap();
        let v = n.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(v.is_finite());
        assert!(v < 1e-3, "constant latent should normalize to ~0, got {v}");
    }

    #[test]
    fn accumulation_is_order_independent() {
        let mut rng = stream_rng(0, Stream::Dataset, 42);
        let latents: Vec<Tensor> = (0..5)
            .map(|i| {
                gaussian_tensor(&mut rng, &[3, 4 + i, 6], DType::F32, &dev())
                    .unwrap()
                    .affine(1.0 + i as f64 * 0.3, i as f64 * 0.1)
                    .unwrap()
            })
            .collect();
        let forward = {
            let mut acc = LatentAccumulator::new(3).unwrap();
            for l in &latents {
                acc.push(l).unwrap();
            }
            acc.finish().unwrap()
        };
        let backward = {
            let mut acc = LatentAccumulator::new(3).unwrap();
            for l in latents.iter().rev() {
                acc.push(l).unwrap();
            }
            acc.finish().unwrap()
        };
        for ch in 0..3 {
            assert!((forward.mu[ch] - backward.mu[ch]).abs() < 1e-10);
            assert!((forward.sigma[ch] - backward.sigma[ch]).abs() < 1e-10);
        }
    }

    #[test]
    fn mismatched_channels_and_empty_finishes_are_rejected() {
        let mut acc = LatentAccumulator::new(2).unwrap();
        let wrong = Tensor::zeros((3usize, 2, 2), DType::F32, &dev()).unwrap();
        assert!(acc.push(&wrong).is_err());
        assert!(acc.finish().is_err());
        assert!(LatentAccumulator::new(0).is_err());
    }

    /// Reorders another dataset; statistics must not care.
    struct Shuffled<'a, D: Dataset> {
        inner: &'a D,
        order: Vec<usize>,
    }

    impl<D: Dataset> Dataset for Shuffled<'_, D> {
        fn len(&self) -> usize {
            self.order.len()
        }
        fn get(&self, index: usize, device: &Device) -> Result<Sample> {
            self.inner.get(self.order[index], device)
        }
        fn fingerprint(&self) -> String {
            format!("shuffled:{}", self.inner.fingerprint())
        }
    }

    fn tiny_encoder() -> (ParamStore, Encoder) {
        let mut ps = ParamStore::new(11, DType::F32, &dev());
        let cfg = EncoderConfig { channels: 4, resblocks: 1 };
        let enc = Encoder::new(&mut ps, "encoder", &cfg).unwrap();
        (ps, enc)
    }

    #[test]
    fn dataset_order_does_not_change_stats() {
        let (_ps, enc) = tiny_encoder();
        let ds = SyntheticShapes::new(4, 16, 16, 2).unwrap();
        let a = compute_latent_stats(&ds, &enc, &dev(), 1).unwrap();
        let shuffled = Shuffled { inner: &ds, order: vec![2, 0, 3, 1] };
        let b = compute_latent_stats(&shuffled, &enc, &dev(), 1).unwrap();
        for ch in 0..4 {
            assert!((a.mu[ch] - b.mu[ch]).abs() < 1e-10);
            assert!((a.sigma[ch] - b.sigma[ch]).abs() < 1e-10);
        }
    }

    #[test]
    fn stride_subsamples_the_dataset() {
        let (_ps, enc) = tiny_encoder();
        let ds = SyntheticShapes::new(4, 16, 16, 2).unwrap();
        let strided = compute_latent_stats(&ds, &enc, &dev(), 2).unwrap();
        // Manual accumulation over indices 0 and 2 must agree exactly.
        let mut acc = LatentAccumulator::new(4).unwrap();
        for i in [0usize, 2] {
            let s = ds.get(i, &dev()).unwrap();
            acc.push(&enc.encode(&s.image).unwrap().tensor().detach()).unwrap();
        }
        let manual = acc.finish().unwrap();
        assert_eq!(strided.mu, manual.mu);
        assert_eq!(strided.sigma, manual.sigma);
        assert!(compute_latent_stats(&ds, &enc, &dev(), 0).is_err());
    }
}
