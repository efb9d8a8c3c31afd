use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::{Scalar, Tensor};

/// Model partitions that a training stage freezes or trains as a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    VisualEncoder,
    DownsampleProjector,
    RegionEncoder,
    RegionProjector,
    WordEmbeddings,
    Decoder,
    LmHead,
}

impl Partition {
    pub const ALL: [Partition; 7] = [
        Partition::VisualEncoder,
        Partition::DownsampleProjector,
        Partition::RegionEncoder,
        Partition::RegionProjector,
        Partition::WordEmbeddings,
        Partition::Decoder,
        Partition::LmHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Partition::VisualEncoder => "visual_encoder",
            Partition::DownsampleProjector => "downsample_projector",
            Partition::RegionEncoder => "region_encoder",
            Partition::RegionProjector => "region_projector",
            Partition::WordEmbeddings => "word_embeddings",
            Partition::Decoder => "decoder",
            Partition::LmHead => "lm_head",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter<F> {
    pub name: String,
    pub partition: Partition,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
}

/// Initialization recipe for a new parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Fixed-frequency sine/cosine table for a `[positions, D]` shape.
    SinCos1d,
    /// Sine/cosine table for a `[g, g, D]` grid: half the channels encode
    /// the row, half the column.
    SinCos2d,
}

fn sincos(pos: f64, d: usize, out: &mut [f64]) {
    for i in 0..d {
        let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
        out[i] = if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, partition: Partition, value: Tensor<F>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            partition,
            value,
            grad,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn init<R: Rng>(&mut self, name: impl Into<String>, partition: Partition, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, F::one()),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| F::lit(dist.sample(rng))).collect();
                Tensor::from_vec(shape, data).expect("shape matches")
            }
            Init::SinCos1d => {
                let (n, d) = (shape[0], shape[1]);
                let mut data = vec![0.0; n * d];
                for p in 0..n {
                    sincos(p as f64, d, &mut data[p * d..(p + 1) * d]);
                }
                Tensor::from_vec(shape, data.into_iter().map(F::lit).collect()).expect("shape matches")
            }
            Init::SinCos2d => {
                let (g, d) = (shape[0], shape[2]);
                let half = d / 2;
                let mut data = vec![0.0; g * g * d];
                for y in 0..g {
                    for x in 0..g {
                        let cell = &mut data[(y * g + x) * d..(y * g + x + 1) * d];
                        sincos(y as f64, half, &mut cell[..half]);
                        sincos(x as f64, d - half, &mut cell[half..]);
                    }
                }
                Tensor::from_vec(shape, data.into_iter().map(F::lit).collect()).expect("shape matches")
            }
        };
        self.add(name, partition, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Mutable gradient buffer, or `None` for frozen parameters (which never
    /// accumulate gradient).
    pub fn grad_mut(&mut self, id: ParamId) -> Option<&mut Tensor<F>> {
        let p = &mut self.params[id.0];
        p.trainable.then_some(&mut p.grad)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    pub fn set_partition_trainable(&mut self, partition: Partition, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.partition == partition) {
            p.trainable = trainable;
        }
    }

    pub fn partition_trainable(&self, partition: Partition) -> bool {
        self.params.iter().any(|p| p.partition == partition && p.trainable)
    }

    pub fn count(&self, partition: Option<Partition>) -> usize {
        self.params
            .iter()
            .filter(|p| partition.map_or(true, |q| p.partition == q))
            .map(|p| p.value.numel())
            .sum()
    }

    /// FNV-1a over the bit patterns of every value in each partition.
    pub fn checksums(&self) -> BTreeMap<Partition, u64> {
        let mut out = BTreeMap::new();
        for part in Partition::ALL {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            let mut any = false;
            for p in self.params.iter().filter(|p| p.partition == part) {
                any = true;
                for b in p.name.bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
                }
                for v in p.value.data() {
                    let bits = v.to_f64().unwrap_or(f64::NAN).to_bits();
                    for b in bits.to_le_bytes() {
                        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
                    }
                }
            }
            if any {
                out.insert(part, h);
            }
        }
        out
    }

    /// Copy of the store in another precision, with gradients cleared.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    partition: p.partition,
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape()),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Overwrites values with those of `other`, matched by position and name.
    pub fn load_values(&mut self, other: &ParamStore<F>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!("{} parameters, expected {}", other.params.len(), self.params.len())));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.data().iter())
            .map(|g| {
                let g = g.to_f64().unwrap_or(f64::NAN);
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: F) {
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            p.grad.scale(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_params_expose_no_grad() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = ps.init("a", Partition::Decoder, &[2, 2], Init::Normal(0.1), &mut rng);
        ps.set_partition_trainable(Partition::Decoder, false);
        assert!(ps.grad_mut(a).is_none());
        ps.set_partition_trainable(Partition::Decoder, true);
        assert!(ps.grad_mut(a).is_some());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut ps = ParamStore::<f32>::new();
        let a = ps.add("a", Partition::LmHead, Tensor::zeros(&[3]));
        ps.add("b", Partition::Decoder, Tensor::zeros(&[3]));
        let before = ps.checksums();
        ps.value_mut(a).data_mut()[1] = 1.0;
        let after = ps.checksums();
        assert_ne!(before[&Partition::LmHead], after[&Partition::LmHead]);
        assert_eq!(before[&Partition::Decoder], after[&Partition::Decoder]);
        assert!(!after.contains_key(&Partition::RegionEncoder));
    }
}
