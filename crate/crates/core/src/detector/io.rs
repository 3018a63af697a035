//! Versioned binary model files.
//!
//! Layout: magic `RDTM`, format version (u32 LE), canonical config text
//! (u32 length + UTF-8), tensor count, then each named tensor as
//! `name_len + name + rank + dims + little-endian f64 values`, and a
//! trailing CRC32 over everything before it. Tensors cover the parameters
//! and the batch-norm running statistics, so save -> load round-trips the
//! model bit-exactly.

use super::{BlockSpec, DetectorConfig, DetectorError, DetectorModel};
use std::fs;
use std::path::Path;

pub const MODEL_MAGIC: &[u8; 4] = b"RDTM";
pub const MODEL_VERSION: u32 = 1;

// ── CRC32 (IEEE) ─────────────────────────────────────────────────────

const fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xedb88320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

static CRC_TABLE: [u32; 256] = crc32_table();

pub fn crc32(bytes: &[u8]) -> u32 {
    let mut c = 0xffffffffu32;
    for &b in bytes {
        c = CRC_TABLE[((c ^ b as u32) & 0xff) as usize] ^ (c >> 8);
    }
    c ^ 0xffffffff
}

// ── canonical config text ────────────────────────────────────────────

fn fmt_f64_list(vs: &[f64]) -> String {
    vs.iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(",")
}

impl DetectorConfig {
    /// Canonical `key = value` text. Float formatting is shortest
    /// round-trip, so `from_text(to_text())` reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let blocks = self
            .backbone_blocks
            .iter()
            .map(|b| format!("{}:{}", b.channels, b.stride))
            .collect::<Vec<_>>()
            .join(",");
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        line("anchor_ratios", fmt_f64_list(&self.anchor_ratios));
        line("anchor_scales", fmt_f64_list(&self.anchor_scales));
        line("backbone_blocks", blocks);
        line("bn_epsilon", format!("{}", self.bn_epsilon));
        line("bn_momentum", format!("{}", self.bn_momentum));
        line("detect_nms_iou", format!("{}", self.detect_nms_iou));
        line(
            "head_channels",
            format!(
                "{},{},{}",
                self.head_channels[0], self.head_channels[1], self.head_channels[2]
            ),
        );
        line("in_channels", format!("{}", self.in_channels));
        line("post_nms_top", format!("{}", self.post_nms_top));
        line("pre_nms_top", format!("{}", self.pre_nms_top));
        line("roi_pool_size", format!("{}", self.roi_pool_size));
        line("rpn_channels", format!("{}", self.rpn_channels));
        line("rpn_nms_iou", format!("{}", self.rpn_nms_iou));
        line("score_threshold", format!("{}", self.score_threshold));
        out
    }

    /// Parse the canonical text, starting from defaults so configs may be
    /// partial. Unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self, DetectorError> {
        let mut cfg = DetectorConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines from `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), DetectorError> {
        let bad = |line: usize, msg: String| DetectorError::Config(format!("line {line}: {msg}"));
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(line_no, format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            let value = value.trim();
            let parse_f64 = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| bad(line_no, format!("bad float {v:?}")))
            };
            let parse_usize = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| bad(line_no, format!("bad integer {v:?}")))
            };
            let parse_f64_list = |v: &str| -> Result<Vec<f64>, DetectorError> {
                v.split(',').map(|p| parse_f64(p.trim())).collect()
            };
            match key {
                "anchor_ratios" => self.anchor_ratios = parse_f64_list(value)?,
                "anchor_scales" => self.anchor_scales = parse_f64_list(value)?,
                "backbone_blocks" => {
                    let mut blocks = Vec::new();
                    for part in value.split(',') {
                        let (c, s) = part.trim().split_once(':').ok_or_else(|| {
                            bad(line_no, format!("block {part:?} wants channels:stride"))
                        })?;
                        blocks.push(BlockSpec {
                            channels: parse_usize(c)?,
                            stride: parse_usize(s)?,
                        });
                    }
                    self.backbone_blocks = blocks;
                }
                "bn_epsilon" => self.bn_epsilon = parse_f64(value)?,
                "bn_momentum" => self.bn_momentum = parse_f64(value)?,
                "detect_nms_iou" => self.detect_nms_iou = parse_f64(value)?,
                "head_channels" => {
                    let parts: Vec<usize> = value
                        .split(',')
                        .map(|p| parse_usize(p.trim()))
                        .collect::<Result<_, _>>()?;
                    if parts.len() != 3 {
                        return Err(bad(line_no, "head_channels wants 3 values".into()));
                    }
                    self.head_channels = [parts[0], parts[1], parts[2]];
                }
                "in_channels" => self.in_channels = parse_usize(value)?,
                "post_nms_top" => self.post_nms_top = parse_usize(value)?,
                "pre_nms_top" => self.pre_nms_top = parse_usize(value)?,
                "roi_pool_size" => self.roi_pool_size = parse_usize(value)?,
                "rpn_channels" => self.rpn_channels = parse_usize(value)?,
                "rpn_nms_iou" => self.rpn_nms_iou = parse_f64(value)?,
                "score_threshold" => self.score_threshold = parse_f64(value)?,
                other => return Err(bad(line_no, format!("unknown key {other:?}"))),
            }
        }
        self.validate()
    }
}

// ── named tensor enumeration (parameters + BN buffers) ───────────────

fn bn_buffer_names(gamma_name: &str) -> (String, String) {
    let prefix = gamma_name.trim_end_matches(".gamma");
    (
        format!("{prefix}.running_mean"),
        format!("{prefix}.running_var"),
    )
}

fn collect_entries(model: &DetectorModel) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut entries = Vec::new();
    let mut bn_slots: Vec<(String, usize)> = Vec::new();
    model.for_each_param(&mut |p| {
        entries.push((
            p.name().to_string(),
            p.tensor.shape().to_vec(),
            p.tensor.data().to_vec(),
        ));
    });
    for block in &model.backbone.blocks {
        bn_slots.push((block.bn.gamma.name().to_string(), block.bn.slot()));
    }
    bn_slots.push((model.rpn.conv.bn.gamma.name().to_string(), model.rpn.conv.bn.slot()));
    for block in &model.heads.stack {
        bn_slots.push((block.bn.gamma.name().to_string(), block.bn.slot()));
    }
    for (gamma_name, slot) in bn_slots {
        let stats = &model.bn_state.slots[slot];
        let (mean_name, var_name) = bn_buffer_names(&gamma_name);
        entries.push((mean_name, vec![stats.mean.len()], stats.mean.clone()));
        entries.push((var_name, vec![stats.var.len()], stats.var.clone()));
    }
    entries
}

fn fill_entry(
    model: &mut DetectorModel,
    name: &str,
    shape: &[usize],
    data: Vec<f64>,
) -> Result<(), DetectorError> {
    let mut found = false;
    model.for_each_param_mut(&mut |p| {
        if p.name() == name {
            found = true;
        }
    });
    if found {
        let mut err = None;
        let mut data = Some(data);
        model.for_each_param_mut(&mut |p| {
            if p.name() == name {
                if p.tensor.shape() != shape {
                    err = Some(format!(
                        "tensor {name}: file shape {shape:?}, model wants {:?}",
                        p.tensor.shape()
                    ));
                } else if let Some(d) = data.take() {
                    p.tensor.data_mut().copy_from_slice(&d);
                }
            }
        });
        return match err {
            Some(e) => Err(DetectorError::Format(e)),
            None => Ok(()),
        };
    }

    // Not a parameter: must be a BN buffer.
    let (kind, prefix) = if let Some(p) = name.strip_suffix(".running_mean") {
        ("mean", p)
    } else if let Some(p) = name.strip_suffix(".running_var") {
        ("var", p)
    } else {
        return Err(DetectorError::Format(format!("unknown tensor {name:?}")));
    };
    let gamma_name = format!("{prefix}.gamma");
    let slot = find_bn_slot(model, &gamma_name)
        .ok_or_else(|| DetectorError::Format(format!("unknown tensor {name:?}")))?;
    let stats = &mut model.bn_state.slots[slot];
    let target = if kind == "mean" {
        &mut stats.mean
    } else {
        &mut stats.var
    };
    if shape != [target.len()] {
        return Err(DetectorError::Format(format!(
            "buffer {name}: file shape {shape:?}, model wants [{}]",
            target.len()
        )));
    }
    target.copy_from_slice(&data);
    Ok(())
}

fn find_bn_slot(model: &DetectorModel, gamma_name: &str) -> Option<usize> {
    for block in &model.backbone.blocks {
        if block.bn.gamma.name() == gamma_name {
            return Some(block.bn.slot());
        }
    }
    if model.rpn.conv.bn.gamma.name() == gamma_name {
        return Some(model.rpn.conv.bn.slot());
    }
    for block in &model.heads.stack {
        if block.bn.gamma.name() == gamma_name {
            return Some(block.bn.slot());
        }
    }
    None
}

impl super::BnLayer {
    fn slot(&self) -> usize {
        self.slot
    }
}

// ── encode / decode ──────────────────────────────────────────────────

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    push_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

/// Serialize the whole model to bytes (without touching the filesystem).
pub fn encode_model(model: &DetectorModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    push_u32(&mut buf, MODEL_VERSION);
    push_str(&mut buf, &model.config.to_text());
    let entries = collect_entries(model);
    push_u32(&mut buf, entries.len() as u32);
    for (name, shape, data) in entries {
        push_str(&mut buf, &name);
        push_u32(&mut buf, shape.len() as u32);
        for d in shape {
            push_u32(&mut buf, d as u32);
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&buf);
    push_u32(&mut buf, crc);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DetectorError> {
        if self.at + n > self.bytes.len() {
            return Err(DetectorError::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DetectorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String, DetectorError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| DetectorError::Format("non-utf8 string".into()))
    }
}

/// Deserialize model bytes, verifying checksum and version.
pub fn decode_model(bytes: &[u8]) -> Result<DetectorModel, DetectorError> {
    if bytes.len() < MODEL_MAGIC.len() + 8 {
        return Err(DetectorError::ChecksumMismatch);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32(body) != stored {
        return Err(DetectorError::ChecksumMismatch);
    }

    let mut r = Reader { bytes: body, at: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(DetectorError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(DetectorError::VersionMismatch {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let config = DetectorConfig::from_text(&r.str()?)?;
    let mut model = DetectorModel::new(config, 0)?;
    let count = r.u32()? as usize;
    let expected = collect_entries(&model).len();
    if count != expected {
        return Err(DetectorError::Format(format!(
            "file has {count} tensors, model wants {expected}"
        )));
    }
    for _ in 0..count {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        fill_entry(&mut model, &name, &shape, data)?;
    }
    if r.at != body.len() {
        return Err(DetectorError::Format("trailing bytes".into()));
    }
    Ok(model)
}

pub fn save_model(model: &DetectorModel, path: &Path) -> Result<(), DetectorError> {
    Ok(fs::write(path, encode_model(model))?)
}

pub fn load_model(path: &Path) -> Result<DetectorModel, DetectorError> {
    decode_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trip() {
        for cfg in [DetectorConfig::default(), DetectorConfig::compact()] {
            let text = cfg.to_text();
            let back = DetectorConfig::from_text(&text).unwrap();
            assert_eq!(cfg, back);
        }
    }

    #[test]
    fn config_text_rejects_unknown_key() {
        assert!(DetectorConfig::from_text("no_such_key = 3\n").is_err());
    }

    #[test]
    fn model_bytes_round_trip_bit_exact() {
        let model = DetectorModel::new(DetectorConfig::compact(), 42).unwrap();
        let bytes = encode_model(&model);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(model, back);
        // save -> load -> save produces identical bytes.
        assert_eq!(bytes, encode_model(&back));
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let model = DetectorModel::new(DetectorConfig::compact(), 1).unwrap();
        let bytes = encode_model(&model);
        let truncated = &bytes[..bytes.len() - 9];
        assert!(matches!(
            decode_model(truncated),
            Err(DetectorError::ChecksumMismatch)
        ));
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let model = DetectorModel::new(DetectorConfig::compact(), 1).unwrap();
        let mut bytes = encode_model(&model);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            decode_model(&bytes),
            Err(DetectorError::ChecksumMismatch)
        ));
    }

    #[test]
    fn future_version_is_rejected_explicitly() {
        let model = DetectorModel::new(DetectorConfig::compact(), 1).unwrap();
        let mut bytes = encode_model(&model);
        // Bump the version field and restamp the checksum.
        bytes[4..8].copy_from_slice(&(MODEL_VERSION + 1).to_le_bytes());
        let body_len = bytes.len() - 4;
        let crc = crc32(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode_model(&bytes),
            Err(DetectorError::VersionMismatch { found, .. }) if found == MODEL_VERSION + 1
        ));
    }

    #[test]
    fn crc32_known_vector() {
        // Standard IEEE test vector.
        assert_eq!(crc32(b"123456789"), 0xcbf43926);
    }
}
