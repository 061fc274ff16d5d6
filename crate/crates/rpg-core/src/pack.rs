//! The ring-pack serialization format.
//!
//! A pack stores the canonical JSON config (model graph, grouping, seeds,
//! bindings, scales), the raw ring values, and the batch-norm/head
//! payloads, with a trailing CRC32 over everything before it. Index plans
//! and sign vectors are NOT stored: they regenerate bit-exactly from the
//! seeds in the config, so every kernel a pack produces is bit-identical to
//! the kernels at save time.
//!
//! Layout (little-endian):
//! ```text
//! "RPG1" | version u32 | config_len u32 | config JSON |
//! ring_count u32 | { ring_len u64, ring_len x f32 } per ring |
//! per node, in node order:
//!   direct kernel (non-generated conv/dense): len u64, f32s
//!   dense bias:                               len u32, f32s
//!   batch norm: channels u32, gamma, beta, running_mean, running_var
//! crc32 u32
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelConfig, Network};
use crate::nn::batchnorm::BatchNorm;
use crate::nn::tensor::Tensor;
use crate::ring::{build_index_plan, GenMode, GeneratorBinding, Grouping, ParameterRing};

pub const MAGIC: [u8; 4] = *b"RPG1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RingMeta {
    id: usize,
    size: usize,
    init_seed: u64,
    shuffle_seed: u64,
    extra_seed: u64,
}

/// Everything needed to regenerate kernels, minus the payload arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PackConfig {
    model: ModelConfig,
    grouping: Grouping,
    gen_mode: GenMode,
    master_seed: u64,
    rings: Vec<RingMeta>,
    bindings: Vec<GeneratorBinding>,
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a trained (or fresh) f32 network into pack bytes.
pub fn pack(net: &Network<f32>) -> Result<Vec<u8>> {
    let config = PackConfig {
        model: net.config.clone(),
        grouping: net.grouping.clone(),
        gen_mode: net.mode,
        master_seed: net.master_seed,
        rings: net
            .rings
            .iter()
            .zip(&net.plans)
            .map(|(r, p)| RingMeta {
                id: r.id,
                size: r.size(),
                init_seed: r.init_seed,
                shuffle_seed: p.shuffle_seed,
                extra_seed: p.extra_seed,
            })
            .collect(),
        bindings: net.bindings.clone(),
    };
    // Round-tripping through Value sorts object keys, so identical states
    // serialize to identical bytes regardless of struct declaration order.
    let config_json = serde_json::to_vec(&serde_json::to_value(&config)?)?;

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);

    out.extend_from_slice(&(net.rings.len() as u32).to_le_bytes());
    for ring in &net.rings {
        out.extend_from_slice(&(ring.size() as u64).to_le_bytes());
        push_f32s(&mut out, &ring.values);
    }

    for node in 0..net.config.nodes.len() {
        if let Some(kernel) = &net.direct[node] {
            out.extend_from_slice(&(kernel.numel() as u64).to_le_bytes());
            push_f32s(&mut out, &kernel.data);
        }
        if let Some(bias) = &net.bias[node] {
            out.extend_from_slice(&(bias.len() as u32).to_le_bytes());
            push_f32s(&mut out, bias);
        }
        if let Some(bn) = &net.bn[node] {
            out.extend_from_slice(&(bn.channels() as u32).to_le_bytes());
            push_f32s(&mut out, &bn.gamma);
            push_f32s(&mut out, &bn.beta);
            push_f32s(&mut out, &bn.running_mean);
            push_f32s(&mut out, &bn.running_var);
        }
    }

    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let slice = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::Format("pack truncated".into()))?;
        self.at += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let raw = self.take(count * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

/// Parses and validates pack bytes back into a network. Rejects bad magic,
/// unknown versions, checksum mismatches, and structural inconsistencies.
pub fn unpack(bytes: &[u8]) -> Result<Network<f32>> {
    if bytes.len() < 16 {
        return Err(Error::Format("pack shorter than its header".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected {MAGIC:02x?}",
            &bytes[..4]
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version(version));
    }

    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader {
        bytes: &bytes[..bytes.len() - 4],
        at: 8,
    };
    let config_len = r.u32()? as usize;
    let config: PackConfig = serde_json::from_slice(r.take(config_len)?)?;

    let ring_count = r.u32()? as usize;
    if ring_count != config.rings.len() {
        return Err(Error::Format(format!(
            "pack declares {ring_count} ring payloads, config has {}",
            config.rings.len()
        )));
    }
    let mut rings = Vec::with_capacity(ring_count);
    for meta in &config.rings {
        let len = r.u64()? as usize;
        if len != meta.size {
            return Err(Error::Format(format!(
                "ring {} payload length {len} != configured size {}",
                meta.id, meta.size
            )));
        }
        rings.push(ParameterRing {
            id: meta.id,
            values: r.f32s(len)?,
            init_seed: meta.init_seed,
        });
    }

    // Rebuild index plans from seeds; layer slices come from the bindings
    // of each ring in offset order.
    let mut plans = Vec::with_capacity(ring_count);
    for meta in &config.rings {
        let mut layers: Vec<&GeneratorBinding> = config
            .bindings
            .iter()
            .filter(|b| b.ring_id == meta.id)
            .collect();
        layers.sort_by_key(|b| b.offset);
        let plan_layers: Vec<(usize, usize)> = layers.iter().map(|b| (b.node, b.len)).collect();
        let plan = build_index_plan(
            meta.id,
            meta.size,
            &plan_layers,
            meta.shuffle_seed,
            meta.extra_seed,
        )?;
        for b in &layers {
            if plan.offsets.get(&b.node) != Some(&b.offset) {
                return Err(Error::Format(format!(
                    "binding offset for node {} disagrees with the rebuilt plan",
                    b.node
                )));
            }
        }
        plans.push(plan);
    }

    let n_nodes = config.model.nodes.len();
    let mut direct: Vec<Option<Tensor<f32>>> = vec![None; n_nodes];
    let mut bias: Vec<Option<Vec<f32>>> = vec![None; n_nodes];
    let mut bn: Vec<Option<BatchNorm<f32>>> = vec![None; n_nodes];
    for node in 0..n_nodes {
        let spec = &config.model.nodes[node];
        let is_kernel = matches!(
            spec.kind,
            LayerKind::Conv2d { .. } | LayerKind::Dense { .. }
        );
        if is_kernel && !spec.generated {
            let len = r.u64()? as usize;
            let (expect, _) = config.model.kernel_dims(node).unwrap();
            if len != expect {
                return Err(Error::Format(format!(
                    "direct kernel at node {node}: payload {len}, expected {expect}"
                )));
            }
            let data = r.f32s(len)?;
            let shape = match spec.kind {
                LayerKind::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => vec![out_ch, in_ch, kernel, kernel],
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => vec![out_features, in_features],
                _ => unreachable!(),
            };
            direct[node] = Some(Tensor::from_vec(&shape, data)?);
        }
        if let LayerKind::Dense { out_features, .. } = spec.kind {
            let len = r.u32()? as usize;
            if len != out_features {
                return Err(Error::Format(format!(
                    "bias at node {node}: payload {len}, expected {out_features}"
                )));
            }
            bias[node] = Some(r.f32s(len)?);
        }
        if let LayerKind::BatchNorm { channels } = spec.kind {
            let c = r.u32()? as usize;
            if c != channels {
                return Err(Error::Format(format!(
                    "batch norm at node {node}: payload {c} channels, expected {channels}"
                )));
            }
            bn[node] = Some(BatchNorm {
                gamma: r.f32s(c)?,
                beta: r.f32s(c)?,
                running_mean: r.f32s(c)?,
                running_var: r.f32s(c)?,
            });
        }
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after pack payload".into()));
    }

    Network::from_parts(
        config.model,
        config.grouping,
        config.gen_mode,
        config.master_seed,
        rings,
        plans,
        config.bindings,
        direct,
        bias,
        bn,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use crate::model::{micro_res_net, Mode};
    use crate::ring::RingSizing;
    use crate::train::{self, TrainConfig};

    fn trained_net(seed: u64) -> Network<f32> {
        let cfg = micro_res_net((3, 12, 12), 4, 4, true);
        let mut net: Network<f32> = Network::build(
            cfg,
            Grouping::PerBlock,
            RingSizing::Fraction(0.4),
            GenMode::BOTH,
            seed,
        )
        .unwrap();
        let bundle = data::synthetic(4, 24, 8, (3, 12, 12), seed ^ 0xABCD);
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 0.02,
            lr_milestones: vec![],
            seed,
            ..TrainConfig::default()
        };
        train::train_model(&mut net, &bundle.train, &bundle.test, &tc, None, |_| {}).unwrap();
        net
    }

    fn all_kernels(net: &Network<f32>) -> Vec<Vec<f32>> {
        (0..net.config.nodes.len())
            .filter(|&n| net.config.nodes[n].generated)
            .map(|n| net.generate_node_kernel(n).unwrap().data)
            .collect()
    }

    #[test]
    fn round_trip_regenerates_kernels_bitwise() {
        let net = trained_net(51);
        let bytes = pack(&net).unwrap();
        let back = unpack(&bytes).unwrap();
        assert_eq!(all_kernels(&net), all_kernels(&back));

        // Inference agrees bitwise too (bn running stats included).
        let bundle = data::synthetic(4, 4, 4, (3, 12, 12), 3);
        let (x, _) = bundle.test.batch::<f32>(&[0, 1, 2, 3]);
        let a = net.forward(&x, Mode::Eval).unwrap();
        let b = back.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a.logits().data, b.logits().data);
    }

    #[test]
    fn pack_bytes_are_canonical() {
        let net = trained_net(52);
        assert_eq!(pack(&net).unwrap(), pack(&net).unwrap());
    }

    #[test]
    fn corrupted_bytes_are_rejected() {
        let net = trained_net(53);
        let bytes = pack(&net).unwrap();
        // A sample of positions across the pack, including the checksum.
        for pos in [0, 5, 9, 40, bytes.len() / 2, bytes.len() - 2] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x01;
            assert!(unpack(&bad).is_err(), "flip at {pos} went undetected");
        }
    }

    #[test]
    fn version_and_magic_checks() {
        let net = trained_net(54);
        let bytes = pack(&net).unwrap();

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        // Recompute the checksum so the version check itself is exercised.
        let end = wrong_version.len() - 4;
        let crc = crc32fast::hash(&wrong_version[..end]);
        wrong_version[end..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(unpack(&wrong_version), Err(Error::Version(9))));

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(unpack(&wrong_magic), Err(Error::Format(_))));

        assert!(matches!(unpack(&bytes[..10]), Err(Error::Format(_))));
        assert!(matches!(
            unpack(&bytes[..bytes.len() - 1]),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn pack_size_tracks_ring_not_dense_kernels() {
        let cfg = micro_res_net((3, 32, 32), 10, 16, true);
        let dense_bytes = 4 * cfg.dense_kernel_params();
        let net: Network<f32> = Network::build(
            cfg,
            Grouping::Global,
            RingSizing::Total(45_000),
            GenMode::BOTH,
            7,
        )
        .unwrap();
        let bytes = pack(&net).unwrap();
        assert!(bytes.len() > 4 * 45_000);
        assert!(
            bytes.len() < dense_bytes,
            "pack {} bytes vs dense kernels {dense_bytes}",
            bytes.len()
        );
    }
}
