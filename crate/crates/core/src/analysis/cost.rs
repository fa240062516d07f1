use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{ModelConfig, ProjectionKind};
use crate::preprocess::pool_plan;
use crate::tensor::kernels::PoolKind;

/// Counting convention embedded in every report.
pub const FLOP_CONVENTION: &str =
    "2 FLOPs per multiply-accumulate, batch 1; conv/affine/scan/gating always counted; \
     norm and elementwise rows under 1% of the total zeroed unless strict";

/// What a row computes; decides whether it is subject to the 1% rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Conv,
    Affine,
    Scan,
    Gating,
    Norm,
    Elementwise,
}

impl CostKind {
    fn minor(self) -> bool {
        matches!(self, CostKind::Norm | CostKind::Elementwise)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub kind: CostKind,
    pub params: usize,
    pub flops: u64,
    /// Weight tensors owned by this row (each appears in exactly one row).
    pub tensors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config_hash: String,
    pub convention: String,
    pub strict: bool,
    pub rows: Vec<CostRow>,
    pub total_params: usize,
    pub total_flops: u64,
}

impl CostReport {
    fn from_rows(cfg_hash: String, mut rows: Vec<CostRow>, strict: bool) -> Self {
        if !strict {
            let full: u64 = rows.iter().map(|r| r.flops).sum();
            for r in rows.iter_mut() {
                if r.kind.minor() && (r.flops as f64) < 0.01 * full as f64 {
                    r.flops = 0;
                }
            }
        }
        CostReport {
            config_hash: cfg_hash,
            convention: FLOP_CONVENTION.to_string(),
            strict,
            total_params: rows.iter().map(|r| r.params).sum(),
            total_flops: rows.iter().map(|r| r.flops).sum(),
            rows,
        }
    }

    pub fn row(&self, name: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Floating-point operations per element for the non-MAC rows.
mod per_elem {
    /// mean, centered square, sum, scale, shift
    pub const LAYER_NORM: u64 = 8;
    /// folded scale and shift at inference
    pub const BATCH_NORM: u64 = 2;
    /// exp, add, divide, multiply
    pub const SILU: u64 = 4;
    /// exp, log1p
    pub const SOFTPLUS: u64 = 2;
}

struct Rows {
    rows: Vec<CostRow>,
}

impl Rows {
    fn push(&mut self, name: impl Into<String>, kind: CostKind, flops: u64, tensors: &[(&str, usize)]) {
        let name = name.into();
        self.push_owned(name.clone(), &name, kind, flops, tensors);
    }

    /// Row whose tensors live under `owner` rather than under the row name.
    fn push_owned(&mut self, name: String, owner: &str, kind: CostKind, flops: u64, tensors: &[(&str, usize)]) {
        self.rows.push(CostRow {
            params: tensors.iter().map(|t| t.1).sum(),
            tensors: tensors.iter().map(|t| format!("{owner}.{}", t.0)).collect(),
            name,
            kind,
            flops,
        });
    }
}

fn projection_rows(r: &mut Rows, name: &str, kind: ProjectionKind, is_p3: bool, n: u64, d: usize) {
    let dd = d * d;
    let du = d as u64;
    match (kind, is_p3) {
        (ProjectionKind::Conv1dK3, p3) => {
            let k = if p3 { 1 } else { 3 };
            r.push(
                name,
                CostKind::Conv,
                2 * (dd * k) as u64 * n,
                &[("weight", dd * k), ("bias", d)],
            );
        }
        (ProjectionKind::Linear3, false) => {
            for i in 0..3 {
                r.push(
                    format!("{name}.{i}"),
                    CostKind::Affine,
                    n * (2 * dd as u64 + du),
                    &[("weight", dd), ("bias", d)],
                );
            }
        }
        _ => r.push(
            name,
            CostKind::Affine,
            n * (2 * dd as u64 + du),
            &[("weight", dd), ("bias", d)],
        ),
    }
}

fn rows_for(cfg: &ModelConfig) -> Result<Vec<CostRow>> {
    cfg.validate()?;
    let mut r = Rows { rows: Vec::new() };
    let [c_in, h, w] = cfg.input_shape;
    let cd = &cfg.chan_ds;
    let (kh, kw) = cd.kernel;
    let c = cd.channels;
    let plane = (h * w) as u64;
    for l in 0..cd.layers {
        let ci = if l == 0 { c_in } else { c };
        let wn = c * ci * kh * kw;
        r.push(
            format!("chan_ds.conv{l}"),
            CostKind::Conv,
            2 * wn as u64 * plane,
            &[("weight", wn), ("bias", c)],
        );
        r.push(
            format!("chan_ds.bn{l}"),
            CostKind::Norm,
            per_elem::BATCH_NORM * c as u64 * plane,
            &[("weight", c), ("bias", c)],
        );
    }
    // pooling: one comparison/add per input element beyond the first per window
    let (mut ph, mut pw) = (h, w);
    let mut pool_flops = 0u64;
    for st in pool_plan(cd) {
        let (oh, ow) = (ph / st.kh, pw / st.kw);
        let per_out = (st.kh * st.kw) as u64 - 1 + u64::from(st.kind == PoolKind::Avg);
        pool_flops += (c * oh * ow) as u64 * per_out;
        (ph, pw) = (oh, ow);
    }
    r.push("chan_ds.pool", CostKind::Elementwise, pool_flops, &[]);

    let (n, p) = cfg.layout()?;
    let (n, d) = (n as u64, cfg.dim);
    let du = d as u64;
    let nd = n * du;
    r.push("embed", CostKind::Affine, n * (2 * (p * d) as u64 + du), &[("weight", p * d), ("bias", d)]);
    r.push("pos_encode", CostKind::Elementwise, nd, &[]);

    let (s, rank) = (cfg.dim_s, cfg.dt_rank);
    let (su, ru) = (s as u64, rank as u64);
    for i in 0..cfg.depth {
        let b = format!("blocks.{i}");
        r.push(
            format!("{b}.norm"),
            CostKind::Norm,
            per_elem::LAYER_NORM * nd,
            &[("weight", d), ("bias", d)],
        );
        projection_rows(&mut r, &format!("{b}.p1"), cfg.projection, false, n, d);
        projection_rows(&mut r, &format!("{b}.p2"), cfg.projection, false, n, d);
        for dir in ["fw", "bw"] {
            let pre = format!("{b}.{dir}");
            r.push(
                format!("{pre}.conv"),
                CostKind::Conv,
                2 * (d * d) as u64 * n,
                &[("weight", d * d), ("bias", d)],
            );
            r.push(
                format!("{pre}.norm"),
                CostKind::Norm,
                per_elem::LAYER_NORM * nd,
                &[("weight", d), ("bias", d)],
            );
            // B, C and the low-rank Δ path, plus bias and softplus on Δ
            let mut sel = 2 * 2 * nd * su + nd + per_elem::SOFTPLUS * nd;
            let mut sel_t = vec![("w_b", d * s), ("w_c", d * s)];
            if rank > 0 {
                sel += 2 * nd * ru * 2;
                sel_t.extend([("w_dt1", d * rank), ("w_dt2", rank * d)]);
            }
            sel_t.push(("dt_bias", d));
            let owner = format!("{pre}.ssm");
            r.push_owned(format!("{owner}.select"), &owner, CostKind::Affine, sel, &sel_t);
            // Ā = exp(ΔA): multiply + exp; B̄ = (Ā − 1)/A · B: sub, div, mul
            r.push_owned(format!("{owner}.discretize"), &owner, CostKind::Scan, 5 * nd * su, &[("a_log", d * s)]);
            // per step: state update and output projection (2·dim·dim_s each) + skip
            r.push_owned(format!("{owner}.scan"), &owner, CostKind::Scan, n * (4 * du * su + 2 * du), &[("d", d)]);
        }
        r.push(format!("{b}.gate"), CostKind::Gating, 3 * nd, &[]);
        r.push(format!("{b}.gate_act"), CostKind::Elementwise, per_elem::SILU * nd, &[]);
        projection_rows(&mut r, &format!("{b}.p3"), cfg.projection, true, n, d);
        r.push(format!("{b}.residual"), CostKind::Elementwise, nd, &[]);
    }
    r.push("pool", CostKind::Elementwise, nd, &[]);
    let q = cfg.n_classes;
    r.push("head", CostKind::Affine, 2 * (d * q) as u64 + q as u64, &[("weight", d * q), ("bias", q)]);
    Ok(r.rows)
}

/// Exact trainable-parameter count from shapes, one row per layer.
pub fn count_params(cfg: &ModelConfig) -> Result<CostReport> {
    Ok(CostReport::from_rows(cfg.hash(), rows_for(cfg)?, true))
}

/// FLOPs per single-sample inference, one row per layer.
pub fn count_flops(cfg: &ModelConfig, strict: bool) -> Result<CostReport> {
    Ok(CostReport::from_rows(cfg.hash(), rows_for(cfg)?, strict))
}

/// Member of `sweep` whose parameter count is nearest `target`; ties go to
/// the smaller dim. Returns `(dim, count)`.
pub fn calibrate_dim(cfg: &ModelConfig, sweep: &[usize], target: f64) -> Result<(usize, usize)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for &dim in sweep {
        let c = ModelConfig { dim, ..cfg.clone() };
        let n = count_params(&c)?.total_params;
        let gap = (n as f64 - target).abs();
        if best.is_none_or(|b| gap < b.2) {
            best = Some((dim, n, gap));
        }
    }
    best.map(|b| (b.0, b.1))
        .ok_or_else(|| crate::Error::invalid("calibrate_dim needs a non-empty sweep"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, presets};
    use crate::preprocess::PatchGeometry;
    use proptest::prelude::*;

    #[test]
    fn rows_cover_every_tensor_once() {
        for (_, cfg, ..) in presets::table() {
            let store = init_weights::<f32>(&cfg, 0).unwrap();
            let rep = count_params(&cfg).unwrap();
            let mut names: Vec<&String> = rep.rows.iter().flat_map(|r| &r.tensors).collect();
            let mut want: Vec<&String> = store.params.keys().collect();
            names.sort();
            want.sort();
            assert_eq!(names, want);
            assert_eq!(rep.total_params, store.num_params());
            assert_eq!(rep.total_params, rep.rows.iter().map(|r| r.params).sum::<usize>());
        }
    }

    #[test]
    fn affine_row_follows_convention() {
        let cfg = presets::uog20();
        let rep = count_flops(&cfg, true).unwrap();
        let head = rep.row("head").unwrap();
        assert_eq!(head.params, 16 * 6 + 6);
        assert_eq!(head.flops, 2 * 16 * 6 + 6);
        let (n, p) = cfg.layout().unwrap();
        assert_eq!(rep.row("embed").unwrap().flops, (n * (2 * p * 16 + 16)) as u64);
    }

    #[test]
    fn doubling_dim_quadruples_projection_params() {
        let cfg = presets::ci4r();
        let a = count_params(&ModelConfig { dim: 16, ..cfg.clone() }).unwrap();
        let b = count_params(&ModelConfig { dim: 32, ..cfg }).unwrap();
        let w = |r: &CostReport| r.row("blocks.0.p1").unwrap().params as f64;
        let ratio = w(&b) / w(&a);
        assert!((3.8..4.1).contains(&ratio), "{ratio}");
    }

    #[test]
    fn loose_mode_only_drops_minor_rows() {
        let cfg = presets::diat();
        let strict = count_flops(&cfg, true).unwrap();
        let loose = count_flops(&cfg, false).unwrap();
        for (s, l) in strict.rows.iter().zip(&loose.rows) {
            if l.flops != s.flops {
                assert!(s.kind.minor() && l.flops == 0, "{}", s.name);
            }
        }
        assert_eq!(loose.total_flops, loose.rows.iter().map(|r| r.flops).sum::<u64>());
    }

    #[test]
    fn calibration_picks_nearest() {
        let cfg = presets::uog20();
        let (dim, n) = calibrate_dim(&cfg, &presets::UOG20_SWEEP, 6.7e3).unwrap();
        assert_eq!(dim, 16);
        assert_eq!(n, count_params(&cfg).unwrap().total_params);
    }

    fn fuzzed() -> impl Strategy<Value = ModelConfig> {
        (
            1usize..=3,
            1usize..=2,
            1usize..=3,
            prop_oneof![Just((1usize, 1usize)), Just((2, 2)), Just((2, 4)), Just((4, 2))],
            0usize..3,
            (1usize..=5).prop_map(|d| 2 * d),
            1usize..=4,
            0usize..=3,
            0usize..3,
            1usize..=2,
            2usize..=5,
        )
            .prop_map(|(c_in, layers, ch, factors, geo, dim, ds, r, proj, depth, q)| {
                let geometry = match geo {
                    0 => PatchGeometry::DopplerAligned,
                    1 => PatchGeometry::TimeAligned,
                    _ => PatchGeometry::Rectangular { h: 2, w: 2 },
                };
                let mut cfg = presets::uog20();
                cfg.input_shape = [c_in, 16, 16];
                cfg.chan_ds.layers = layers;
                cfg.chan_ds.channels = ch;
                cfg.chan_ds.factors = factors;
                cfg.geometry = geometry;
                cfg.dim = dim;
                cfg.dim_s = ds;
                cfg.dt_rank = r;
                cfg.projection = ProjectionKind::ALL[proj];
                cfg.depth = depth;
                cfg.n_classes = q;
                cfg
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn count_matches_instantiated_weights(cfg in fuzzed()) {
            let store = init_weights::<f32>(&cfg, 1).unwrap();
            prop_assert_eq!(count_params(&cfg).unwrap().total_params, store.num_params());
        }

        #[test]
        fn flops_are_additive_and_monotone(cfg in fuzzed()) {
            let a = count_flops(&cfg, true).unwrap();
            prop_assert_eq!(a.total_flops, a.rows.iter().map(|r| r.flops).sum::<u64>());
            let wider = ModelConfig { dim: cfg.dim + 2, ..cfg.clone() };
            let deeper = ModelConfig { depth: cfg.depth + 1, ..cfg.clone() };
            let more_state = ModelConfig { dim_s: cfg.dim_s + 1, ..cfg.clone() };
            for bigger in [wider, deeper, more_state] {
                prop_assert!(count_flops(&bigger, true).unwrap().total_flops > a.total_flops);
            }
            let mut taller = cfg.clone();
            taller.input_shape[1] *= 2;
            prop_assert!(count_flops(&taller, true).unwrap().total_flops > a.total_flops);
        }
    }
}
