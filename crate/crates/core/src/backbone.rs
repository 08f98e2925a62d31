//! Four-block convolutional embedding network, global classification head
//! and prototype few-shot head.
//!
//! Each block is `conv3x3 -> ReLU -> avg_pool2`; channel width doubles and
//! spatial extent halves per block. Style hooks live after blocks 1 to 3.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::io::NamedTensor;
use crate::tensor::{Gradients, Tape, Tensor};

pub const NUM_BLOCKS: usize = 4;
/// Blocks whose outputs may carry a substituted style.
pub const STYLE_BLOCKS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Architecture {
    pub in_channels: usize,
    pub base_width: usize,
    pub num_classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            in_channels: 3,
            base_width: 8,
            num_classes: 12,
        }
    }
}

impl Architecture {
    /// Input channel count of block `j` (1-based).
    pub fn block_in(&self, j: usize) -> usize {
        if j == 1 {
            self.in_channels
        } else {
            self.block_out(j - 1)
        }
    }

    pub fn block_out(&self, j: usize) -> usize {
        self.base_width << (j - 1)
    }

    pub fn embed_dim(&self) -> usize {
        self.block_out(NUM_BLOCKS)
    }
}

/// Trainable state: conv weights/biases per block, the global linear head and
/// the (fixed) prototype temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    /// Block weights, block biases, head weight, head bias, in that order.
    pub tensors: Vec<NamedTensor>,
    pub proto_temp: f64,
}

impl ModelParams {
    pub fn init(arch: Architecture, proto_temp: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for j in 1..=NUM_BLOCKS {
            let (ci, co) = (arch.block_in(j), arch.block_out(j));
            let he = Normal::new(0.0, (2.0 / (ci * 9) as f64).sqrt()).unwrap();
            let w = (0..co * ci * 9).map(|_| he.sample(&mut rng)).collect();
            tensors.push(NamedTensor::new(format!("block{j}.weight"), vec![co, ci, 3, 3], w));
            tensors.push(NamedTensor::new(format!("block{j}.bias"), vec![co], vec![0.0; co]));
        }
        let (d, nc) = (arch.embed_dim(), arch.num_classes);
        let lin = Normal::new(0.0, (1.0 / d as f64).sqrt()).unwrap();
        let w = (0..d * nc).map(|_| lin.sample(&mut rng)).collect();
        tensors.push(NamedTensor::new("head.weight", vec![d, nc], w));
        tensors.push(NamedTensor::new("head.bias", vec![nc], vec![0.0; nc]));
        ModelParams {
            arch,
            tensors,
            proto_temp,
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// All trainable values concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Order-sensitive FNV checksum over the raw bits of every parameter.
    pub fn checksum(&self) -> u64 {
        self.flatten().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }

    /// Materializes the parameters as tensors: differentiable leaves on
    /// `tape`, or constants when `tape` is `None`.
    pub fn bind(&self, tape: Option<&Tape>) -> Backbone {
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let c = Tensor::new(t.shape.clone(), t.data.clone()).expect("consistent params");
                match tape {
                    Some(tape) => tape.leaf(&c),
                    None => c,
                }
            })
            .collect();
        Backbone {
            arch: self.arch,
            tensors,
            proto_temp: self.proto_temp,
        }
    }

    pub fn to_records(&self) -> Vec<NamedTensor> {
        let mut out = self.tensors.clone();
        out.push(NamedTensor::new("proto.temp", vec![1], vec![self.proto_temp]));
        out
    }

    pub fn from_records(records: Vec<NamedTensor>) -> Result<Self> {
        let mut temp = None;
        let mut tensors = Vec::new();
        for r in records {
            if r.name == "proto.temp" {
                temp = r.data.first().copied();
            } else {
                tensors.push(r);
            }
        }
        let proto_temp = temp.ok_or_else(|| Error::Format("missing proto.temp".into()))?;
        let first = tensors
            .first()
            .filter(|t| t.name == "block1.weight" && t.shape.len() == 4)
            .ok_or_else(|| Error::Format("missing block1.weight".into()))?;
        let head = tensors
            .iter()
            .find(|t| t.name == "head.bias")
            .ok_or_else(|| Error::Format("missing head.bias".into()))?;
        let arch = Architecture {
            in_channels: first.shape[1],
            base_width: first.shape[0],
            num_classes: head.shape[0],
        };
        let expected = ModelParams::init(arch, proto_temp, 0);
        let names_match = expected.tensors.len() == tensors.len()
            && expected
                .tensors
                .iter()
                .zip(&tensors)
                .all(|(e, t)| e.name == t.name && e.shape == t.shape);
        if !names_match {
            return Err(Error::Format("checkpoint layout does not match the backbone".into()));
        }
        Ok(ModelParams {
            arch,
            tensors,
            proto_temp,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::io::save(path, &self.to_records())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_records(crate::io::load(path)?)
    }
}

/// Parameters bound as tensors for one forward pass.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub arch: Architecture,
    tensors: Vec<Tensor>,
    pub proto_temp: f64,
}

/// A block's output feature map together with the block that produced it.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub feature: Tensor,
    pub block_index: usize,
}

impl Backbone {
    fn weight(&self, j: usize) -> &Tensor {
        &self.tensors[2 * (j - 1)]
    }

    fn bias(&self, j: usize) -> &Tensor {
        &self.tensors[2 * (j - 1) + 1]
    }

    fn head(&self) -> (&Tensor, &Tensor) {
        (&self.tensors[2 * NUM_BLOCKS], &self.tensors[2 * NUM_BLOCKS + 1])
    }

    /// Gradients of every parameter, flattened in canonical order.
    pub fn flat_gradients(&self, grads: &Gradients) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| grads.wrt(t).to_vec()).collect()
    }

    /// Applies block `j` (1-based) to `input`.
    pub fn forward_block(&self, input: &Tensor, j: usize) -> Result<BlockOutput> {
        if !(1..=NUM_BLOCKS).contains(&j) {
            return Err(invalid(format!("block index {j} outside 1..={NUM_BLOCKS}")));
        }
        if input.rank() != 4 || input.shape()[1] != self.arch.block_in(j) {
            return Err(Error::ShapeMismatch {
                op: "forward_block",
                lhs: input.shape().to_vec(),
                rhs: self.weight(j).shape().to_vec(),
            });
        }
        let feature = input
            .conv3x3(self.weight(j), self.bias(j))?
            .relu_avg_pool2()?;
        Ok(BlockOutput {
            feature,
            block_index: j,
        })
    }

    /// Plain forward of blocks `from..=to` starting from `input`, which must
    /// be the image batch when `from == 1` or the output of block `from - 1`.
    pub fn forward_range(&self, input: &Tensor, from: usize, to: usize) -> Result<BlockOutput> {
        let mut out = BlockOutput {
            feature: input.clone(),
            block_index: from - 1,
        };
        for j in from..=to {
            out = self.forward_block(&out.feature, j)?;
        }
        Ok(out)
    }

    pub fn forward(&self, images: &Tensor) -> Result<BlockOutput> {
        self.forward_range(images, 1, NUM_BLOCKS)
    }

    /// Spatially averaged block-4 output, shape `(B, D)`.
    pub fn embed(&self, feature: &BlockOutput) -> Result<Tensor> {
        expect_final(feature)?;
        feature.feature.spatial_mean()
    }

    /// Global-head logits `(B, num_classes)` from a block-4 output.
    pub fn global_classify(&self, feature: &BlockOutput) -> Result<Tensor> {
        let emb = self.embed(feature)?;
        self.classify_embedding(&emb)
    }

    pub fn classify_embedding(&self, emb: &Tensor) -> Result<Tensor> {
        let (w, b) = self.head();
        emb.matmul(w)?.add(&b.repeat_rows(emb.shape()[0])?)
    }
}

fn expect_final(feature: &BlockOutput) -> Result<()> {
    if feature.block_index != NUM_BLOCKS {
        return Err(invalid(format!(
            "expected a block-{NUM_BLOCKS} feature, got block {}",
            feature.block_index
        )));
    }
    Ok(())
}

/// Prototype logits: `-temp * ||q - centroid_c||^2` for each query row and
/// class `c`, where centroids average the support rows of each class.
pub fn proto_classify(
    support: &Tensor,
    support_labels: &[usize],
    query: &Tensor,
    num_classes: usize,
    temp: f64,
) -> Result<Tensor> {
    if support.rank() != 2 || query.rank() != 2 || support.shape()[1] != query.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "proto_classify",
            lhs: support.shape().to_vec(),
            rhs: query.shape().to_vec(),
        });
    }
    let (ns, d) = (support.shape()[0], support.shape()[1]);
    if support_labels.len() != ns {
        return Err(invalid(format!(
            "proto_classify: {} labels for {ns} support rows",
            support_labels.len()
        )));
    }
    let mut counts = vec![0usize; num_classes];
    for &l in support_labels {
        if l >= num_classes {
            return Err(invalid(format!("support label {l} >= {num_classes}")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(invalid(format!("class {c} has no support samples")));
    }
    let mut avg = vec![0.0; num_classes * ns];
    for (i, &l) in support_labels.iter().enumerate() {
        avg[l * ns + i] = 1.0 / counts[l] as f64;
    }
    let centroids = Tensor::new(vec![num_classes, ns], avg)?.matmul(support)?;
    let nq = query.shape()[0];
    let mut columns = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let centroid = centroids.slice_batch(c, 1)?.reshape(&[d])?;
        let diff = query.sub(&centroid.repeat_rows(nq)?)?;
        let dist = diff.mul(&diff)?.sum_axis(1)?;
        columns.push(dist.reshape(&[1, nq])?);
    }
    Tensor::concat_batch(&columns)?.transpose()?.scale(-temp)
}
