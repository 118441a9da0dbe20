//! safetensors I/O for backbone weights in timm tensor naming.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::vit::{Block, Dense, LayerNorm, VitBackbone, VitConfig};
use crate::zoo::BackboneSpec;

/// `(name, shape, values)` for every base tensor, in a fixed order. Query,
/// key and value are fused into `attn.qkv` as timm stores them.
pub fn named_tensors(b: &VitBackbone) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let c = &b.cfg;
    let d = c.embed_dim;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: Vec<f32>| out.push((name, shape, data));
    let vec1 = |a: &Array1<f32>| a.iter().copied().collect::<Vec<_>>();
    let vec2 = |a: &Array2<f32>| a.iter().copied().collect::<Vec<_>>();

    push(
        "patch_embed.proj.weight".into(),
        vec![d, c.in_chans, c.patch_size, c.patch_size],
        vec2(&b.patch_embed.w),
    );
    if let Some(bias) = &b.patch_embed.b {
        push("patch_embed.proj.bias".into(), vec![d], vec1(bias));
    }
    push("cls_token".into(), vec![1, 1, d], vec1(&b.cls_token));
    if c.reg_tokens > 0 {
        push("reg_token".into(), vec![1, c.reg_tokens, d], vec2(&b.reg_tokens));
    }
    push("pos_embed".into(), vec![1, c.pos_len(), d], vec2(&b.pos_embed));
    for (i, blk) in b.blocks.iter().enumerate() {
        let p = format!("blocks.{i}");
        push(format!("{p}.norm1.weight"), vec![d], vec1(&blk.norm1.gamma));
        push(format!("{p}.norm1.bias"), vec![d], vec1(&blk.norm1.beta));
        let qkv = concatenate![Axis(0), blk.q.w, blk.k.w, blk.v.w];
        push(format!("{p}.attn.qkv.weight"), vec![3 * d, d], vec2(&qkv));
        if let (Some(q), Some(k), Some(v)) = (&blk.q.b, &blk.k.b, &blk.v.b) {
            push(format!("{p}.attn.qkv.bias"), vec![3 * d], vec1(&concatenate![Axis(0), *q, *k, *v]));
        }
        push(format!("{p}.attn.proj.weight"), vec![d, d], vec2(&blk.proj.w));
        if let Some(bias) = &blk.proj.b {
            push(format!("{p}.attn.proj.bias"), vec![d], vec1(bias));
        }
        if let Some(g) = &blk.ls1 {
            push(format!("{p}.ls1.gamma"), vec![d], vec1(g));
        }
        push(format!("{p}.norm2.weight"), vec![d], vec1(&blk.norm2.gamma));
        push(format!("{p}.norm2.bias"), vec![d], vec1(&blk.norm2.beta));
        for (name, dense) in [("fc1", &blk.fc1), ("fc2", &blk.fc2)] {
            push(format!("{p}.mlp.{name}.weight"), vec![dense.w.nrows(), dense.w.ncols()], vec2(&dense.w));
            if let Some(bias) = &dense.b {
                push(format!("{p}.mlp.{name}.bias"), vec![bias.len()], vec1(bias));
            }
        }
        if let Some(g) = &blk.ls2 {
            push(format!("{p}.ls2.gamma"), vec![d], vec1(g));
        }
    }
    push("norm.weight".into(), vec![d], vec1(&b.norm.gamma));
    push("norm.bias".into(), vec![d], vec1(&b.norm.beta));
    out
}

pub fn save_backbone(b: &VitBackbone, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tensors = named_tensors(b);
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .into_iter()
        .map(|(n, shape, data)| (n, shape, data.iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect();
    let views = bytes
        .iter()
        .map(|(n, shape, data)| {
            TensorView::new(Dtype::F32, shape.clone(), data)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Weights(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let buf = safetensors::serialize(views, None).map_err(|e| Error::Weights(e.to_string()))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    st: SafeTensors<'a>,
}

impl Reader<'_> {
    fn has(&self, name: &str) -> bool {
        self.st.tensor(name).is_ok()
    }

    fn get(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let t = self
            .st
            .tensor(name)
            .map_err(|_| Error::Weights(format!("missing tensor {name}")))?;
        let raw = t.data();
        let values: Vec<f32> = match t.dtype() {
            Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
            Dtype::F16 => raw
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            Dtype::BF16 => raw
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            other => return Err(Error::Weights(format!("{name}: unsupported dtype {other:?}"))),
        };
        Ok((t.shape().to_vec(), values))
    }

    /// Reads a tensor whose element count must be `rows × cols`.
    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Array2<f32>> {
        let (shape, v) = self.get(name)?;
        if v.len() != rows * cols {
            return Err(Error::Weights(format!("{name}: shape {shape:?}, expected {rows}×{cols} elements")));
        }
        Ok(Array2::from_shape_vec((rows, cols), v).expect("length checked"))
    }

    fn vector(&self, name: &str, len: usize) -> Result<Array1<f32>> {
        Ok(self.matrix(name, 1, len)?.into_shape_with_order(len).expect("1×len"))
    }

    fn opt_vector(&self, name: &str, len: usize) -> Result<Option<Array1<f32>>> {
        if self.has(name) {
            self.vector(name, len).map(Some)
        } else {
            Ok(None)
        }
    }

    fn dense(&self, prefix: &str, out: usize, inp: usize) -> Result<Dense> {
        Ok(Dense {
            w: self.matrix(&format!("{prefix}.weight"), out, inp)?,
            b: self.opt_vector(&format!("{prefix}.bias"), out)?,
        })
    }

    fn norm(&self, prefix: &str, d: usize, eps: f32) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.vector(&format!("{prefix}.weight"), d)?,
            beta: self.vector(&format!("{prefix}.bias"), d)?,
            eps,
        })
    }

    fn leading(&self, name: &str, d: usize) -> Result<Option<usize>> {
        if !self.has(name) {
            return Ok(None);
        }
        let (_, v) = self.get(name)?;
        if v.len() % d != 0 {
            return Err(Error::Weights(format!("{name}: length {} not a multiple of {d}", v.len())));
        }
        Ok(Some(v.len() / d))
    }
}

/// Loads base weights for `spec`, accepting fused `attn.qkv` or separate
/// `attn.{q,k,v}` tensors in F32, F16 or BF16.
pub fn load_backbone(path: &Path, spec: &BackboneSpec) -> Result<VitBackbone> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Weights(format!("{}: {e}", path.display())))?;
    from_reader(&Reader { st }, spec.vit_config())
}

fn from_reader(r: &Reader<'_>, cfg: VitConfig) -> Result<VitBackbone> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let eps = cfg.ln_eps;

    let regs = r.leading("reg_token", d)?.unwrap_or(0);
    if regs != cfg.reg_tokens {
        return Err(Error::Weights(format!("file has {regs} register tokens, registry says {}", cfg.reg_tokens)));
    }
    let pos = r.leading("pos_embed", d)?.unwrap_or(0);
    if pos != cfg.pos_len() {
        return Err(Error::Weights(format!("pos_embed covers {pos} tokens, expected {}", cfg.pos_len())));
    }
    if r.has("blocks.0.ls1.gamma") != cfg.layer_scale {
        return Err(Error::Weights("layer scale presence disagrees with the registry".into()));
    }
    let gated = match cfg.mlp {
        crate::vit::MlpKind::Gelu => cfg.mlp_hidden,
        crate::vit::MlpKind::SwiGlu => cfg.mlp_hidden / 2,
    };

    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let p = format!("blocks.{i}");
        let (q, k, v) = if r.has(&format!("{p}.attn.qkv.weight")) {
            let w = r.matrix(&format!("{p}.attn.qkv.weight"), 3 * d, d)?;
            let b = r.opt_vector(&format!("{p}.attn.qkv.bias"), 3 * d)?;
            let part = |j: usize| Dense {
                w: w.slice(s![j * d..(j + 1) * d, ..]).to_owned(),
                b: b.as_ref().map(|b| b.slice(s![j * d..(j + 1) * d]).to_owned()),
            };
            (part(0), part(1), part(2))
        } else {
            (
                r.dense(&format!("{p}.attn.q"), d, d)?,
                r.dense(&format!("{p}.attn.k"), d, d)?,
                r.dense(&format!("{p}.attn.v"), d, d)?,
            )
        };
        blocks.push(Block {
            norm1: r.norm(&format!("{p}.norm1"), d, eps)?,
            q,
            k,
            v,
            proj: r.dense(&format!("{p}.attn.proj"), d, d)?,
            ls1: r.opt_vector(&format!("{p}.ls1.gamma"), d)?,
            norm2: r.norm(&format!("{p}.norm2"), d, eps)?,
            fc1: r.dense(&format!("{p}.mlp.fc1"), cfg.mlp_hidden, d)?,
            fc2: r.dense(&format!("{p}.mlp.fc2"), d, gated)?,
            ls2: r.opt_vector(&format!("{p}.ls2.gamma"), d)?,
        });
    }
    let reg_tokens = if regs > 0 { r.matrix("reg_token", regs, d)? } else { Array2::zeros((0, d)) };
    let backbone = VitBackbone {
        patch_embed: r.dense("patch_embed.proj", d, cfg.patch_dim())?,
        cls_token: r.vector("cls_token", d)?,
        reg_tokens,
        pos_embed: r.matrix("pos_embed", cfg.pos_len(), d)?,
        blocks,
        norm: r.norm("norm", d, eps)?,
        cfg,
    };
    backbone.validate()?;
    Ok(backbone)
}

/// Parses tensors from an in-memory buffer; used for tests and tooling.
pub fn load_backbone_bytes(bytes: &[u8], spec: &BackboneSpec) -> Result<VitBackbone> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Weights(e.to_string()))?;
    from_reader(&Reader { st }, spec.vit_config())
}

/// Tensor names and shapes in a safetensors file.
pub fn inspect(path: &Path) -> Result<HashMap<String, Vec<usize>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Weights(e.to_string()))?;
    Ok(st.tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{backbone_checksum, find_backbone, list_backbones, load_base};

    fn tiny() -> BackboneSpec {
        find_backbone(&list_backbones(), "tiny-test").unwrap()
    }

    #[test]
    fn round_trip_preserves_every_tensor() {
        let spec = tiny();
        let b = load_base(&spec, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny-test.safetensors");
        save_backbone(&b, &path).unwrap();
        let back = load_backbone(&path, &spec).unwrap();
        assert_eq!(back, b);
        assert_eq!(backbone_checksum(&back), backbone_checksum(&b));
        let names = inspect(&path).unwrap();
        assert_eq!(names["blocks.0.attn.qkv.weight"], vec![192, 64]);
        assert_eq!(names["patch_embed.proj.weight"], vec![64, 3, 16, 16]);
    }

    #[test]
    fn half_precision_and_split_qkv_load() {
        let spec = tiny();
        let b = load_base(&spec, None).unwrap();
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, shape, data) in named_tensors(&b) {
            if let Some(prefix) = name.strip_suffix(".attn.qkv.weight") {
                let d = shape[1];
                for (j, t) in ["q", "k", "v"].iter().enumerate() {
                    let part = &data[j * d * d..(j + 1) * d * d];
                    owned.push((
                        format!("{prefix}.attn.{t}.weight"),
                        vec![d, d],
                        part.iter().flat_map(|v| half::f16::from_f32(*v).to_le_bytes()).collect(),
                    ));
                }
                continue;
            }
            if name.ends_with(".attn.qkv.bias") {
                continue;
            }
            owned.push((name, shape, data.iter().flat_map(|v| half::f16::from_f32(*v).to_le_bytes()).collect()));
        }
        let views: Vec<_> = owned
            .iter()
            .map(|(n, s, d)| (n.clone(), TensorView::new(Dtype::F16, s.clone(), d).unwrap()))
            .collect();
        let buf = safetensors::serialize(views, None).unwrap();
        let back = load_backbone_bytes(&buf, &spec).unwrap();
        assert!(back.blocks[0].q.b.is_none());
        let diff = (&back.blocks[2].v.w - &b.blocks[2].v.w).mapv(f32::abs).fold(0.0f32, |a, &x| a.max(x));
        assert!(diff < 2e-3, "{diff}");
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let spec = tiny();
        let b = load_base(&spec, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        save_backbone(&b, &path).unwrap();
        let mut other = spec.clone();
        other.reg_tokens = 4;
        assert!(matches!(load_backbone(&path, &other), Err(Error::Weights(_))));
        let mut deeper = spec;
        deeper.depth = 5;
        assert!(matches!(load_backbone(&path, &deeper), Err(Error::Weights(_))));
    }
}
