//! Gradient and oracle suites for the detection-head kernels.
//!
//! Every differentiable op is probed against central finite differences of
//! `L = <r, op(x)>` for a random upstream `r`. Probes whose `+h`/`-h`
//! perturbations land on different sides of a kink (ReLU sign flip, bilinear
//! cell change, L1 sign change, label reassignment) are skipped and counted.
//!
//! The oracle checks compare kernels against naive re-implementations that
//! share no code with [`super::head`] beyond the public API.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::gradcheck::{GradCheckConfig, GradCheckReport};
use super::head::*;
use super::loss::{detection_loss, detection_loss_grad, ImageRole, LossConfig};
use super::register_target;
use super::tensor::{FeatureMap, PooledFeature, ScoreMap};
use crate::geometry::{iou, BBox};

pub const DEFAULT_SEED: u64 = 0x5eed_0001;
pub const DEFAULT_PROBES: usize = 120;
const PROBES_PER_INSTANCE: usize = 30;
const MAX_INSTANCES: usize = 200;

#[derive(Debug, Clone, Copy)]
pub struct SelfTestConfig {
    pub seed: u64,
    /// Minimum compared probes per op.
    pub probes: usize,
    pub grad: GradCheckConfig,
}

impl Default for SelfTestConfig {
    fn default() -> Self {
        SelfTestConfig {
            seed: DEFAULT_SEED,
            probes: DEFAULT_PROBES,
            grad: GradCheckConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub cases: usize,
    pub max_abs_error: f64,
    pub tolerance: f64,
}

impl OracleReport {
    fn new(name: &str, tolerance: f64) -> Self {
        OracleReport {
            name: name.to_string(),
            cases: 0,
            max_abs_error: 0.0,
            tolerance,
        }
    }

    fn compare(&mut self, got: &[f64], want: &[f64]) {
        self.cases += 1;
        if got.len() != want.len() {
            self.max_abs_error = f64::INFINITY;
            return;
        }
        for (g, w) in got.iter().zip(want) {
            let e = (g - w).abs();
            self.max_abs_error = if e.is_nan() {
                f64::INFINITY
            } else {
                self.max_abs_error.max(e)
            };
        }
    }

    pub fn passed(&self) -> bool {
        self.cases > 0 && self.max_abs_error <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfTestReport {
    pub gradients: Vec<GradCheckReport>,
    pub oracles: Vec<OracleReport>,
}

impl SelfTestReport {
    pub fn passed(&self) -> bool {
        self.gradients.iter().all(GradCheckReport::passed) && self.oracles.iter().all(OracleReport::passed)
    }
}

pub fn run_selftest(cfg: &SelfTestConfig) -> SelfTestReport {
    SelfTestReport {
        gradients: gradient_suite(cfg),
        oracles: oracle_suite(cfg.seed),
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn pick(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(0..n)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn perturbed(x: &[f64], i: usize, h: f64) -> (Vec<f64>, Vec<f64>) {
    let mut p = x.to_vec();
    let mut m = x.to_vec();
    p[i] += h;
    m[i] -= h;
    (p, m)
}

/// Non-integer coordinate in `(0, len - 1)`, at least 0.05 from any integer.
fn off_grid(rng: &mut ChaCha8Rng, len: usize) -> f64 {
    rng.random_range(0..len - 1) as f64 + rng.random_range(0.05..0.95)
}

/// Runs instances from `make` until at least `cfg.probes` probes compared.
fn drive(
    name: &str,
    cfg: &SelfTestConfig,
    rng: &mut ChaCha8Rng,
    mut make: impl FnMut(&mut ChaCha8Rng, &mut GradCheckReport, GradCheckConfig),
) -> GradCheckReport {
    let mut report = GradCheckReport::new(name);
    let mut n = 0;
    while report.probes < cfg.probes && n < MAX_INSTANCES {
        make(rng, &mut report, cfg.grad);
        n += 1;
    }
    report
}

pub fn gradient_suite(cfg: &SelfTestConfig) -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.grad.step;
    let mut out = Vec::new();

    out.push(drive("modulate", cfg, &mut rng, |rng, rep, g| {
        let (c, hh, w) = (3, 4, 5);
        let n = c * hh * w;
        let x = uniform(rng, n + c, -1.0, 1.0);
        let r = uniform(rng, n, -1.0, 1.0);
        let split = |x: &[f64]| (FeatureMap::new(c, hh, w, x[..n].to_vec()).unwrap(), x[n..].to_vec());
        let f = |x: &[f64]| {
            let (fm, t) = split(x);
            dot(modulate(&fm, &t).unwrap().data(), &r)
        };
        let (fm, t) = split(&x);
        let (gf, gt) = modulate_backward(&fm, &t, &fm.with_data(r.clone()).unwrap()).unwrap();
        let analytic: Vec<f64> = gf.data().iter().chain(&gt).copied().collect();
        rep.probe(
            &f,
            &x,
            &analytic,
            &pick(rng, n + c, PROBES_PER_INSTANCE),
            &|_, _| true,
            g,
        );
    }));

    out.push(drive("score_stack", cfg, &mut rng, |rng, rep, g| {
        let (c, hh, w) = (4, 5, 5);
        let head = ScoreHead::random(&[c, 6, 4, 3, 1], 1.5, rng).unwrap();
        let x = uniform(rng, c * hh * w, -1.0, 1.0);
        let r = uniform(rng, hh * w, -1.0, 1.0);
        let fm = |x: &[f64]| FeatureMap::new(c, hh, w, x.to_vec()).unwrap();
        let f = |x: &[f64]| dot(score_stack(&fm(x), &head).unwrap().data(), &r);
        let analytic = head
            .backward(&fm(&x), &ScoreMap::new(hh, w, r.clone()).unwrap())
            .unwrap();
        let smooth = |x: &[f64], i: usize| {
            let (p, m) = perturbed(x, i, h);
            head.relu_pattern(&fm(&p)).unwrap() == head.relu_pattern(&fm(&m)).unwrap()
        };
        rep.probe(
            &f,
            &x,
            analytic.data(),
            &pick(rng, x.len(), PROBES_PER_INSTANCE),
            &smooth,
            g,
        );
    }));

    out.push(drive("softmax_center", cfg, &mut rng, |rng, rep, g| {
        let (hh, w) = (4, 6);
        let x = uniform(rng, hh * w, -2.0, 2.0);
        let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let f = |x: &[f64]| {
            let c = softmax_center(&ScoreMap::new(hh, w, x.to_vec()).unwrap()).unwrap();
            a * c.c_y + b * c.c_x
        };
        let center = softmax_center(&ScoreMap::new(hh, w, x.clone()).unwrap()).unwrap();
        let analytic = softmax_center_backward(&center, a, b);
        rep.probe(
            &f,
            &x,
            analytic.data(),
            &pick(rng, x.len(), PROBES_PER_INSTANCE),
            &|_, _| true,
            g,
        );
    }));

    out.push(drive("bilinear_sample", cfg, &mut rng, |rng, rep, g| {
        let (c, hh, w) = (3, 4, 5);
        let n = c * hh * w;
        let mut x = uniform(rng, n, -1.0, 1.0);
        x.push(off_grid(rng, hh));
        x.push(off_grid(rng, w));
        let r = uniform(rng, c, -1.0, 1.0);
        let fm = |x: &[f64]| FeatureMap::new(c, hh, w, x[..n].to_vec()).unwrap();
        let f = |x: &[f64]| dot(&bilinear_sample(&fm(x), x[n], x[n + 1]).unwrap(), &r);
        let (gf, gy, gx) = bilinear_sample_backward(&fm(&x), x[n], x[n + 1], &r).unwrap();
        let analytic: Vec<f64> = gf.data().iter().copied().chain([gy, gx]).collect();
        let smooth = |x: &[f64], i: usize| {
            let (p, m) = perturbed(x, i, h);
            p[n].floor() == m[n].floor() && p[n + 1].floor() == m[n + 1].floor()
        };
        let mut idx = pick(rng, n, PROBES_PER_INSTANCE - 2);
        idx.extend([n, n + 1]);
        rep.probe(&f, &x, &analytic, &idx, &smooth, g);
    }));

    out.push(drive("refine_box", cfg, &mut rng, |rng, rep, g| {
        let (c, hh, w) = (4, 4, 4);
        let n = c * hh * w;
        let mlp = Mlp::random(&[c, DEFAULT_REFINE_HIDDEN, DEFAULT_REFINE_HIDDEN, 4], 1.0, rng).unwrap();
        let mut x = uniform(rng, n, -1.0, 1.0);
        x.push(off_grid(rng, hh));
        x.push(off_grid(rng, w));
        let r = uniform(rng, 4, -1.0, 1.0);
        let fm = |x: &[f64]| FeatureMap::new(c, hh, w, x[..n].to_vec()).unwrap();
        let f = |x: &[f64]| dot(&refine_box_at(&fm(x), x[n], x[n + 1], &mlp).unwrap().outputs(), &r);
        let (gf, gy, gx) = refine_box_backward(&fm(&x), x[n], x[n + 1], &mlp, [r[0], r[1], r[2], r[3]]).unwrap();
        let analytic: Vec<f64> = gf.data().iter().copied().chain([gy, gx]).collect();
        let smooth = |x: &[f64], i: usize| {
            let (p, m) = perturbed(x, i, h);
            if p[n].floor() != m[n].floor() || p[n + 1].floor() != m[n + 1].floor() {
                return false;
            }
            let fp = bilinear_sample(&fm(&p), p[n], p[n + 1]).unwrap();
            let fmv = bilinear_sample(&fm(&m), m[n], m[n + 1]).unwrap();
            mlp.relu_pattern(&fp) == mlp.relu_pattern(&fmv)
        };
        let mut idx = pick(rng, n, PROBES_PER_INSTANCE - 2);
        idx.extend([n, n + 1]);
        rep.probe(&f, &x, &analytic, &idx, &smooth, g);
    }));

    out.push(drive("cls_confidence", cfg, &mut rng, |rng, rep, g| {
        let (c, s) = (3, DEFAULT_CLS_SIZE);
        let n = c * s * s;
        let x = uniform(rng, 2 * n, -0.3, 0.3);
        let split = |x: &[f64]| {
            (
                PooledFeature::new(c, s, x[..n].to_vec()).unwrap(),
                PooledFeature::new(c, s, x[n..].to_vec()).unwrap(),
            )
        };
        let f = |x: &[f64]| {
            let (roi, t) = split(x);
            cls_confidence(&roi, &t).unwrap()
        };
        let (roi, t) = split(&x);
        let (gr, gt) = cls_confidence_backward(&roi, &t, 1.0).unwrap();
        let analytic: Vec<f64> = gr.into_iter().chain(gt).collect();
        rep.probe(
            &f,
            &x,
            &analytic,
            &pick(rng, 2 * n, PROBES_PER_INSTANCE),
            &|_, _| true,
            g,
        );
    }));

    out.push(drive("detection_loss", cfg, &mut rng, |rng, rep, g| {
        let loss_cfg = LossConfig {
            positive_weight: rng.random_range(0.5..2.0),
            index_weight: rng.random_range(0.5..2.0),
            negative_weight: rng.random_range(0.5..2.0),
            l1_weight: rng.random_range(0.5..2.0),
            giou_weight: rng.random_range(0.5..2.0),
            ..LossConfig::default()
        };
        let role = [ImageRole::Positive, ImageRole::Index, ImageRole::Negative][rng.random_range(0..3)];
        let gt = BBox::new(
            rng.random_range(0.0..10.0),
            rng.random_range(0.0..10.0),
            rng.random_range(2.0..8.0),
            rng.random_range(2.0..8.0),
        );
        let jitter = rng.random_range(0.1..3.0);
        let x = vec![
            gt.x + rng.random_range(-jitter..jitter),
            gt.y + rng.random_range(-jitter..jitter),
            (gt.w + rng.random_range(-jitter..jitter)).max(0.5),
            (gt.h + rng.random_range(-jitter..jitter)).max(0.5),
            rng.random_range(0.05..0.95),
        ];
        let gt_opt = (role != ImageRole::Negative).then_some(gt);
        let bx = |x: &[f64]| BBox::new(x[0], x[1], x[2], x[3]);
        let f = |x: &[f64]| {
            detection_loss(&bx(x), x[4], gt_opt.as_ref(), &loss_cfg, role)
                .unwrap()
                .total
        };
        let (gb, gc) = detection_loss_grad(&bx(&x), x[4], gt_opt.as_ref(), &loss_cfg, role).unwrap();
        let analytic = [gb[0], gb[1], gb[2], gb[3], gc];
        let edges = |b: &BBox| [b.x, b.y, b.x2(), b.y2(), b.w, b.h];
        let smooth = |x: &[f64], i: usize| {
            let (p, m) = perturbed(x, i, h);
            let (bp, bm) = (bx(&p), bx(&m));
            let far = |b: &BBox| edges(b).iter().zip(edges(&gt)).all(|(a, e)| (a - e).abs() > 1e-3);
            let side = |b: &BBox| edges(b).iter().zip(edges(&gt)).map(|(a, e)| a > &e).collect::<Vec<_>>();
            far(&bp)
                && far(&bm)
                && side(&bp) == side(&bm)
                && loss_cfg.assign(iou(&bp, &gt)) == loss_cfg.assign(iou(&bm, &gt))
        };
        let idx: Vec<usize> = (0..5).collect();
        rep.probe(&f, &x, &analytic, &idx, &smooth, g);
    }));

    out
}

/// Direct nested-loop 3x3 convolution with zero padding.
fn conv_oracle(layer: &Conv3x3, input: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (ci, co) = (layer.in_channels, layer.out_channels);
    let mut out = vec![0.0; co * h * w];
    for o in 0..co {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = layer.bias[o];
                for i in 0..ci {
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let (sy, sx) = (y + ky - 1, x + kx - 1);
                            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                continue;
                            }
                            let wv = layer.weight[((o * ci + i) * 3 + ky as usize) * 3 + kx as usize];
                            acc += wv * input[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y as usize) * w + x as usize] = acc;
            }
        }
    }
    out
}

fn dense_oracle(layer: &Dense, x: &[f64]) -> Vec<f64> {
    let mut out = layer.bias.clone();
    for (o, v) in out.iter_mut().enumerate() {
        for (i, xv) in x.iter().enumerate() {
            *v += layer.weight[o * layer.inputs + i] * xv;
        }
    }
    out
}

/// ROIAlign through [`bilinear_sample`]: every sample point is computed
/// independently and clamped to the grid.
pub fn roi_align_oracle(f: &FeatureMap, b: &BBox, s: usize) -> Vec<f64> {
    let r = ROI_SAMPLING_RATIO;
    let (hy, hx) = ((f.height() - 1) as f64, (f.width() - 1) as f64);
    let mut out = vec![0.0; f.channels() * s * s];
    for i in 0..s {
        for j in 0..s {
            let mut acc = vec![0.0; f.channels()];
            for a in 0..r {
                for bb in 0..r {
                    let y = b.y + (i as f64 + (a as f64 + 0.5) / r as f64) * b.h / s as f64;
                    let x = b.x + (j as f64 + (bb as f64 + 0.5) / r as f64) * b.w / s as f64;
                    let v = bilinear_sample(f, y.clamp(0.0, hy), x.clamp(0.0, hx)).unwrap();
                    acc.iter_mut().zip(v).for_each(|(t, v)| *t += v);
                }
            }
            for (c, v) in acc.into_iter().enumerate() {
                out[(c * s + i) * s + j] = v / (r * r) as f64;
            }
        }
    }
    out
}

/// ROIAlign fixtures: the full 2x2 map, single-cell and random boxes.
pub fn roi_fixtures(seed: u64) -> Vec<(FeatureMap, BBox, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0a11);
    let mut v = vec![
        (
            FeatureMap::new(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
            BBox::new(0.0, 0.0, 1.0, 1.0),
            2,
        ),
        (
            FeatureMap::new(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
            BBox::new(-0.5, -0.5, 2.0, 2.0),
            2,
        ),
        (
            FeatureMap::new(1, 1, 1, vec![4.0]).unwrap(),
            BBox::new(-0.5, -0.5, 1.0, 1.0),
            1,
        ),
    ];
    for _ in 0..40 {
        let (c, h, w) = (rng.random_range(1..4), rng.random_range(1..7), rng.random_range(1..7));
        let f = FeatureMap::new(c, h, w, uniform(&mut rng, c * h * w, -2.0, 2.0)).unwrap();
        let bx = rng.random_range(-0.45..w as f64 - 0.6);
        let by = rng.random_range(-0.45..h as f64 - 0.6);
        let b = BBox::new(bx, by, rng.random_range(0.2..4.0), rng.random_range(0.2..4.0));
        let s = [1, 2, 3, 5][rng.random_range(0..4)];
        v.push((f, b, s));
    }
    v
}

pub fn oracle_suite(seed: u64) -> Vec<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0c0ffee);
    let mut out = Vec::new();

    let mut conv = OracleReport::new("score_stack_conv_oracle", 1e-6);
    for (schedule, h, w) in [(DEFAULT_SCORE_SCHEDULE.to_vec(), 3, 4), (vec![5, 4, 3, 2, 1], 6, 5)] {
        let head = ScoreHead::random(&schedule, 1.0, &mut rng).unwrap();
        let input = uniform(&mut rng, schedule[0] * h * w, -1.0, 1.0);
        let got = score_stack(&FeatureMap::new(schedule[0], h, w, input.clone()).unwrap(), &head).unwrap();
        let mut a = input;
        let last = head.layers().len() - 1;
        for (k, layer) in head.layers().iter().enumerate() {
            a = conv_oracle(layer, &a, h, w);
            if k < last {
                a.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        conv.compare(got.data(), &a);
    }
    out.push(conv);

    let mut dense = OracleReport::new("refine_box_dense_oracle", 1e-6);
    for _ in 0..5 {
        let c = 8;
        let mlp = Mlp::random(&[c, DEFAULT_REFINE_HIDDEN, DEFAULT_REFINE_HIDDEN, 4], 1.0, &mut rng).unwrap();
        let f = FeatureMap::new(c, 3, 3, uniform(&mut rng, c * 9, -1.0, 1.0)).unwrap();
        let (cy, cx) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
        let got = refine_box_at(&f, cy, cx, &mlp).unwrap();
        let mut a = bilinear_sample(&f, cy, cx).unwrap();
        for (k, layer) in mlp.layers().iter().enumerate() {
            a = dense_oracle(layer, &a);
            if k + 1 < mlp.layers().len() {
                a.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        let want = [cy + a[0], cx + a[1], a[2].max(0.0), a[3].max(0.0)];
        dense.compare(&got.outputs(), &want);
    }
    out.push(dense);

    let mut roi = OracleReport::new("roi_align_bilinear_oracle", 1e-9);
    for (f, b, s) in roi_fixtures(seed) {
        roi.compare(roi_align(&f, &b, s).unwrap().data(), &roi_align_oracle(&f, &b, s));
    }
    out.push(roi);

    let mut constant = OracleReport::new("roi_align_constant_map", 0.0);
    for v in [0.0, 1.0, -3.25, 7.5] {
        let f = FeatureMap::new(2, 4, 5, vec![v; 40]).unwrap();
        let b = BBox::new(0.3, -0.2, 3.1, 2.7);
        constant.compare(roi_align(&f, &b, 3).unwrap().data(), &[v; 18]);
    }
    out.push(constant);

    let mut reg = OracleReport::new("register_target_mean", 1e-9);
    let (c, s) = (4, DEFAULT_CLS_SIZE);
    let refs: Vec<(Vec<f64>, PooledFeature)> = (0..3)
        .map(|_| {
            (
                uniform(&mut rng, c, -1.0, 1.0),
                PooledFeature::new(c, s, uniform(&mut rng, c * s * s, -1.0, 1.0)).unwrap(),
            )
        })
        .collect();
    let desc = register_target(&refs).unwrap();
    let n = refs.len() as f64;
    let want_loc: Vec<f64> = (0..c).map(|k| refs.iter().map(|r| r.0[k]).sum::<f64>() / n).collect();
    let want_cls: Vec<f64> = (0..c * s * s)
        .map(|k| refs.iter().map(|r| r.1.data()[k]).sum::<f64>() / n)
        .collect();
    reg.compare(&desc.t_loc, &want_loc);
    reg.compare(desc.t_cls.data(), &want_cls);
    out.push(reg);

    let mut closed = OracleReport::new("softmax_center_closed_forms", 1e-9);
    let uni = softmax_center(&ScoreMap::new(5, 5, vec![0.0; 25]).unwrap()).unwrap();
    closed.compare(&[uni.c_y, uni.c_x], &[2.0, 2.0]);
    let small = softmax_center(&ScoreMap::new(2, 2, vec![0.0, 3f64.ln(), 0.0, 0.0]).unwrap()).unwrap();
    closed.compare(&small.p, &[1.0 / 6.0, 0.5, 1.0 / 6.0, 1.0 / 6.0]);
    closed.compare(&[small.c_y, small.c_x], &[1.0 / 3.0, 2.0 / 3.0]);
    out.push(closed);

    out
}
