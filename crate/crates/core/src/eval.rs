//! Return normalization, generalization reports and attention-importance maps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{AttnRecords, MaskMode};
use crate::env::{generate_level, write_ppm, Action, EnvKind, EnvState, SIZE};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::paths::{effective_input_relevance, PathMatrix};
use crate::policy::{greedy_action, Policy};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::PixelRect;

/// `(raw − lo)/(hi − lo)` clipped to `[0, 1]`.
pub fn normalize_return_with(raw: f64, lo: f64, hi: f64) -> Result<f64> {
    if !(hi > lo) {
        return Err(Error::config(format!("return bounds need R_max > R_min, got ({lo}, {hi})")));
    }
    Ok(((raw - lo) / (hi - lo)).clamp(0.0, 1.0))
}

pub fn normalize_return(raw: f64, kind: EnvKind) -> Result<f64> {
    let (lo, hi) = kind.return_bounds();
    normalize_return_with(raw, lo, hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMeta {
    pub policy_kind: String,
    pub level_seed: u64,
    pub step: usize,
}

/// Per-token importance and its spread over pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub tokens: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width`.
    pub pixels: Vec<f64>,
    pub meta: ImportanceMeta,
}

fn to_f64<F: Scalar>(t: &Tensor<F>) -> Vec<f64> {
    t.data().iter().map(|x| x.as_f64()).collect()
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik != 0.0 {
                for j in 0..n {
                    out[i * n + j] += aik * b[k * n + j];
                }
            }
        }
    }
    out
}

/// Attention rollout: `R = Â^L⋯Â^1` with `Â = ½P + ½I`, importance `P_out·R`
/// with path-irrelevant tokens zeroed, renormalized to sum 1.
pub fn attention_importance<F: Scalar>(records: &AttnRecords<F>, paths: Option<&PathMatrix<F>>) -> Result<Vec<f64>> {
    let out = to_f64(&records.output.attention);
    let n = out.len();
    if n == 0 {
        return Err(Error::Usage("attention importance needs a non-empty output attention record".into()));
    }
    let mut r: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect();
    for layer in &records.layers {
        let p = to_f64(&layer.attention);
        if p.len() != n * n {
            return Err(Error::shape("attention_importance", layer.attention.shape(), &[n, n]));
        }
        let a_hat: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(k, &v)| 0.5 * v + if k / n == k % n { 0.5 } else { 0.0 })
            .collect();
        r = matmul(&a_hat, &r, n);
    }
    let mut imp: Vec<f64> = (0..n).map(|j| (0..n).map(|i| out[i] * r[i * n + j]).sum()).collect();
    if let Some(pm) = paths {
        for (v, relevant) in imp.iter_mut().zip(effective_input_relevance(pm)) {
            if !relevant {
                *v = 0.0;
            }
        }
    }
    let total: f64 = imp.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DivisionByZero("attention importance"));
    }
    imp.iter_mut().for_each(|v| *v /= total);
    Ok(imp)
}

/// Spreads token importance uniformly over each token's receptive field.
pub fn pixel_map(tokens: &[f64], fields: &[PixelRect], height: usize, width: usize) -> Result<Vec<f64>> {
    if tokens.len() != fields.len() {
        return Err(Error::shape("pixel_map", &[tokens.len()], &[fields.len()]));
    }
    let mut px = vec![0.0; height * width];
    for (&v, f) in tokens.iter().zip(fields) {
        let share = v / f.area() as f64;
        for y in f.y0..f.y1.min(height) {
            for x in f.x0..f.x1.min(width) {
                px[y * width + x] += share;
            }
        }
    }
    Ok(px)
}

impl ImportanceMap {
    pub fn new(tokens: Vec<f64>, fields: &[PixelRect], height: usize, width: usize, meta: ImportanceMeta) -> Result<Self> {
        let pixels = pixel_map(&tokens, fields, height, width)?;
        Ok(ImportanceMap {
            tokens,
            height,
            width,
            pixels,
            meta,
        })
    }

    /// 8-bit gray levels, brightest pixel at 255 (all-zero maps stay black).
    pub fn gray_levels(&self) -> Vec<u8> {
        let max = self.pixels.iter().copied().fold(0.0, f64::max);
        self.pixels
            .iter()
            .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
            .collect()
    }

    /// Writes `{stem}.pgm` (binary, maxval 255) and `{stem}.json`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let pgm = dir.join(format!("{stem}.pgm"));
        let json = dir.join(format!("{stem}.json"));
        let mut bytes = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.gray_levels());
        std::fs::write(&pgm, bytes).map_err(|e| Error::io(&pgm, e))?;
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        Ok((pgm, json))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Reads a binary PGM written by [`ImportanceMap::export`].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let schema = |msg: &str| Error::Schema {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(schema("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(schema("expected P5 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| schema("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| schema("bad height"))?;
    let data = bytes.get(pos + 1..).unwrap_or_default().to_vec();
    if data.len() != w * h {
        return Err(schema("pixel count does not match header"));
    }
    Ok((w, h, data))
}

/// Importance map of one greedy step under eval-mode masks.
pub fn step_importance<F: Scalar>(
    policy: &Policy<F>,
    store: &ParamStore<F>,
    obs: &Tensor<F>,
    meta: ImportanceMeta,
) -> Result<(ImportanceMap, usize)> {
    let trunk = policy
        .trunk()
        .ok_or_else(|| Error::Usage(format!("{} policy has no attention to visualize", policy.kind())))?;
    let out = policy.evaluate(store, obs, MaskMode::Eval)?;
    let aux = out.aux.as_ref().expect("attention policies report records");
    let tokens = attention_importance(&aux.records, aux.paths.as_ref())?;
    let fields = trunk.tokenizer.extractor.config.receptive_fields()?;
    let map = ImportanceMap::new(tokens, &fields, SIZE, SIZE, meta)?;
    Ok((map, greedy_action(out.action_logits.data())))
}

/// Plays one greedy episode on `level_seed` and exports, for the first
/// `frames` steps, `frame_XXX.pgm/.json` importance maps next to
/// `frame_XXX.ppm` renders of the observation.
pub fn render_episode<F: Scalar>(
    policy: &Policy<F>,
    store: &ParamStore<F>,
    kind: EnvKind,
    level_seed: u64,
    frames: usize,
    out: &Path,
) -> Result<Vec<ImportanceMap>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut env = EnvState::new(Arc::new(generate_level(kind, level_seed)));
    let mut maps = Vec::new();
    while !env.done && maps.len() < frames {
        let meta = ImportanceMeta {
            policy_kind: policy.kind().to_string(),
            level_seed,
            step: env.t,
        };
        let (map, action) = step_importance(policy, store, &env.observe(), meta)?;
        let stem = format!("frame_{:03}", env.t);
        map.export(out, &stem)?;
        write_ppm(&env, &out.join(format!("{stem}.ppm")), 16)?;
        maps.push(map);
        env.step(Action::from_index(action))?;
    }
    Ok(maps)
}

/// Final-step returns of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub kind: String,
    pub alpha: f64,
    pub step: usize,
    pub train_return: f64,
    pub test_return: f64,
}

const REQUIRED: [&str; 5] = ["step", "policy_kind", "alpha", "split", "mean_return"];

/// Reads a metrics CSV and returns its last evaluation.
pub fn read_final(path: &Path) -> Result<RunSummary> {
    let schema = |msg: String| Error::Schema {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| schema(e.to_string()))?;
    let header = reader.headers().map_err(|e| schema(e.to_string()))?.clone();
    let mut idx = [0usize; 5];
    for (slot, col) in idx.iter_mut().zip(REQUIRED) {
        *slot = header
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| schema(format!("missing column '{col}'")))?;
    }
    let mut last: Option<RunSummary> = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| schema(e.to_string()))?;
        let get = |i: usize| rec.get(idx[i]).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            get(i)
                .parse()
                .map_err(|_| schema(format!("non-numeric {} '{}'", REQUIRED[i], get(i))))
        };
        let step = num(0)? as usize;
        let s = match last.take() {
            Some(s) if s.step == step => s,
            _ => RunSummary {
                kind: get(1).to_string(),
                alpha: num(2)?,
                step,
                train_return: f64::NAN,
                test_return: f64::NAN,
            },
        };
        let mut s = s;
        match get(3) {
            "train" => s.train_return = num(4)?,
            "test" => s.test_return = num(4)?,
            other => return Err(schema(format!("unknown split '{other}'"))),
        }
        last = Some(s);
    }
    last.ok_or_else(|| schema("no rows".into()))
}

/// One aggregated `(kind, α)` row.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub kind: String,
    pub alpha: f64,
    pub seed_count: usize,
    pub train_return: f64,
    pub test_return: f64,
    pub test_return_norm: f64,
    pub gap: f64,
    /// Standard error of the mean test return across seeds.
    pub se: f64,
}

/// Mean and standard error (sample standard deviation over √n; 0 for n = 1).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Aggregates run summaries by `(kind, α)`.
pub fn aggregate(runs: &[RunSummary], env: EnvKind) -> Result<Vec<ReportRow>> {
    let mut groups: BTreeMap<(String, String), Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        groups.entry((r.kind.clone(), format!("{:.6}", r.alpha))).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let train: Vec<f64> = g.iter().map(|r| r.train_return).collect();
            let test: Vec<f64> = g.iter().map(|r| r.test_return).collect();
            let (train_m, _) = mean_se(&train);
            let (test_m, se) = mean_se(&test);
            Ok(ReportRow {
                kind: g[0].kind.clone(),
                alpha: g[0].alpha,
                seed_count: g.len(),
                train_return: train_m,
                test_return: test_m,
                test_return_norm: normalize_return(test_m, env)?,
                gap: train_m - test_m,
                se,
            })
        })
        .collect()
}

pub const REPORT_HEADER: [&str; 8] = [
    "kind",
    "alpha",
    "seed_count",
    "train_return",
    "test_return",
    "test_return_norm",
    "gap",
    "se",
];

fn row_fields(r: &ReportRow) -> [String; 8] {
    [
        r.kind.clone(),
        format!("{:.6}", r.alpha),
        r.seed_count.to_string(),
        format!("{:.6}", r.train_return),
        format!("{:.6}", r.test_return),
        format!("{:.6}", r.test_return_norm),
        format!("{:.6}", r.gap),
        format!("{:.6}", r.se),
    ]
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = REPORT_HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&row_fields(r).join(","));
        out.push('\n');
    }
    out
}

pub fn report_table(rows: &[ReportRow]) -> String {
    let cells: Vec<[String; 8]> = rows.iter().map(row_fields).collect();
    let widths: Vec<usize> = (0..8)
        .map(|c| cells.iter().map(|r| r[c].len()).chain([REPORT_HEADER[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, fields: &[&str]| {
        let parts: Vec<String> = fields
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (f, &w))| if c == 0 { format!("{f:<w$}") } else { format!("{f:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &REPORT_HEADER);
    for r in &cells {
        line(&mut out, &r.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

/// Reads every metrics file and aggregates its final evaluation.
pub fn generalization_report(files: &[PathBuf], env: EnvKind) -> Result<Vec<ReportRow>> {
    let runs = files.iter().map(|f| read_final(f)).collect::<Result<Vec<_>>>()?;
    aggregate(&runs, env)
}
