//! Acceptance suite. Prints one `PASS`/`FAIL`/`SKIP` line per criterion and
//! exits non-zero if any criterion fails.
//!
//! The quantitative criteria (8-11) need the MNIST and Fashion-MNIST IDX files
//! under `$NOISNN_DATA/{mnist,fashion-mnist}` (default: `<workspace>/data`).
//! Trained models are cached under `<workspace>/target/acceptance/models`.
//! Criterion 12 only runs with `--extended`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use noisnn::arch::{init_params, parse_arch, NetworkSpec};
use noisnn::autodiff::{Graph, NodeId, SurrogateParams};
use noisnn::dataio::{self, decode_checkpoint, encode_checkpoint, Checkpoint, Dataset, Split};
use noisnn::rng::{Purpose, SeedTree};
use noisnn::runtime::{self, EvalOptions, NoiseKeys, RunMode, Stage};
use noisnn::spiking::{lif_step, lif_step_leaky, residual_noise_spec, renormalize_potential, LIFParams, LIFState};
use noisnn::spiking::{NoiseFamily, NoiseSpec, RenormParams};
use noisnn::tensor::Tensor;
use noisnn_cli::experiments::{self, BenchSettings, TrainProtocol, DEFAULT_ARCH, VALIDATION_HOLDOUT};

type Check = Result<String, String>;

const TRAIN_SUBSET: usize = 10_000;
const TRAIN_EPOCHS: usize = 10;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const EVAL_IMAGES: usize = 2000;
const EVAL_BATCH: usize = 256;
const T_MAX: usize = 10;

const BENCH_TRAIN_IMAGES: usize = 2000;
const BENCH_EVAL_IMAGES: usize = 1000;
const BENCH_TARGET_ACC: f64 = 0.70;
const BENCH_LR: f64 = 1e-3;
const BENCH_MAX_EPOCHS: usize = 30;
const BENCH_BUDGET_SECONDS: f64 = 900.0;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn data_root() -> PathBuf {
    std::env::var_os("NOISNN_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("data"))
}

fn cache_dir() -> PathBuf {
    workspace().join("target/acceptance")
}

fn rng(tag: u64) -> ChaCha8Rng {
    SeedTree::new(0xacce_97ed).simple(Purpose::Init, tag)
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Reference implementations in f64, written independently of the library.

fn ref_fc(x: &[f64], w: &[f64], b: Option<&[f64]>, batch: usize, fin: usize, fout: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * fout];
    for n in 0..batch {
        for o in 0..fout {
            let mut s = b.map_or(0.0, |b| b[o]);
            for i in 0..fin {
                s += x[n * fin + i] * w[i * fout + o];
            }
            y[n * fout + o] = s;
        }
    }
    y
}

fn ref_conv(x: &[f64], k: &[f64], b: Option<&[f64]>, dims: [usize; 5]) -> Vec<f64> {
    let [batch, cin, cout, h, w] = dims;
    let mut y = vec![0.0; batch * cout * h * w];
    for n in 0..batch {
        for o in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    let mut s = b.map_or(0.0, |b| b[o]);
                    for c in 0..cin {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (yy, xx) = (i + di, j + dj);
                                if yy < 1 || xx < 1 || yy > h || xx > w {
                                    continue;
                                }
                                s += x[((n * cin + c) * h + yy - 1) * w + xx - 1] * k[((o * cin + c) * 3 + di) * 3 + dj];
                            }
                        }
                    }
                    y[((n * cout + o) * h + i) * w + j] = s;
                }
            }
        }
    }
    y
}

fn ref_pool(x: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [batch, c, h, w] = dims;
    let (ho, wo) = (h / 2, w / 2);
    let mut y = vec![0.0; batch * c * ho * wo];
    for p in 0..batch * c {
        for i in 0..ho {
            for j in 0..wo {
                let at = |a: usize, b: usize| x[(p * h + a) * w + b];
                y[(p * ho + i) * wo + j] =
                    0.25 * (at(2 * i, 2 * j) + at(2 * i + 1, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j + 1));
            }
        }
    }
    y
}

fn ref_mse(p: &[f64], t: &[f64]) -> f64 {
    p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64
}

fn ref_surrogate(x: f64, a: f64, v_th: f64) -> f64 {
    let u = PI / 2.0 * a * (x - v_th);
    a / (2.0 * (1.0 + u * u))
}

// ---------------------------------------------------------------------------
// C1

type Build<'a> = Box<dyn Fn(&mut Graph, &[NodeId]) -> noisnn::Result<NodeId> + 'a>;
type Reference<'a> = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64> + 'a>;

/// Compares the library's vector-Jacobian product against central
/// differences of `Σ c·f(x)` computed with the f64 reference.
fn fd_trial(r: &mut ChaCha8Rng, inputs: &[Tensor], build: &Build, reference: &Reference) -> Result<(f64, usize), String> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.parameter(t.clone())).collect();
    let y = build(&mut g, &ids).map_err(err)?;
    let upstream = rand_tensor(r, g.value(y).shape(), -1.0, 1.0);
    let c = f64s(&upstream);
    g.backward_with(y, upstream).map_err(err)?;

    let base: Vec<Vec<f64>> = inputs.iter().map(f64s).collect();
    let objective = |xs: &[Vec<f64>]| reference(xs).iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
    let ref_out = reference(&base);
    let lib_out = f64s(g.value(y));
    ensure(ref_out.len() == lib_out.len(), || "reference output length differs".into())?;
    for (a, b) in ref_out.iter().zip(&lib_out) {
        ensure((a - b).abs() <= 1e-4 * (1.0 + a.abs()), || format!("forward mismatch {a} vs {b}"))?;
    }

    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, id) in ids.iter().enumerate() {
        let ad = g.grad(*id).map(f64s).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let coords: Vec<usize> = if ad.len() <= 24 {
            (0..ad.len()).collect()
        } else {
            (0..24).map(|_| r.random_range(0..ad.len())).collect()
        };
        for j in coords {
            let mut xs = base.clone();
            xs[k][j] += h;
            let up = objective(&xs);
            xs[k][j] -= 2.0 * h;
            let down = objective(&xs);
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - ad[j]).abs() / fd.abs().max(ad[j].abs()).max(1e-2);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok((worst, checked))
}

fn c1_gradients() -> Check {
    let t0 = Instant::now();
    let mut r = rng(1);
    let mut trials = 0;
    let mut coords = 0;
    let mut worst = 0.0f64;
    let mut worst_op = "";
    let ops = ["fc", "conv3", "avgpool2", "reshape", "add", "sub", "mul", "scale", "add_const", "mse", "chain"];
    for round in 0..10 {
        for op in ops {
            let (inputs, build, reference): (Vec<Tensor>, Build, Reference) = match op {
                "fc" => {
                    let (b, fi, fo) = (r.random_range(1..5), r.random_range(1..9), r.random_range(1..7));
                    let bias = round % 2 == 0;
                    let mut v = vec![rand_tensor(&mut r, &[b, fi], -1.0, 1.0), rand_tensor(&mut r, &[fi, fo], -1.0, 1.0)];
                    if bias {
                        v.push(rand_tensor(&mut r, &[fo], -1.0, 1.0));
                    }
                    (
                        v,
                        Box::new(move |g, ids| g.fc(ids[0], ids[1], ids.get(2).copied())),
                        Box::new(move |xs| ref_fc(&xs[0], &xs[1], xs.get(2).map(|v| v.as_slice()), b, fi, fo)),
                    )
                }
                "conv3" => {
                    let dims = [
                        r.random_range(1..3),
                        r.random_range(1..4),
                        r.random_range(1..4),
                        r.random_range(1..6),
                        r.random_range(1..6),
                    ];
                    let [b, ci, co, h, w] = dims;
                    let bias = round % 2 == 1;
                    let mut v = vec![
                        rand_tensor(&mut r, &[b, ci, h, w], -1.0, 1.0),
                        rand_tensor(&mut r, &[co, ci, 3, 3], -1.0, 1.0),
                    ];
                    if bias {
                        v.push(rand_tensor(&mut r, &[co], -1.0, 1.0));
                    }
                    (
                        v,
                        Box::new(move |g, ids| g.conv3(ids[0], ids[1], ids.get(2).copied())),
                        Box::new(move |xs| ref_conv(&xs[0], &xs[1], xs.get(2).map(|v| v.as_slice()), dims)),
                    )
                }
                "avgpool2" => {
                    let dims = [r.random_range(1..3), r.random_range(1..4), r.random_range(2..8), r.random_range(2..8)];
                    (
                        vec![rand_tensor(&mut r, &dims, -1.0, 1.0)],
                        Box::new(|g, ids| g.avgpool2(ids[0])),
                        Box::new(move |xs| ref_pool(&xs[0], dims)),
                    )
                }
                "reshape" => {
                    let (a, b) = (r.random_range(1..5), r.random_range(1..5));
                    (
                        vec![rand_tensor(&mut r, &[a, b, 2], -1.0, 1.0)],
                        Box::new(move |g, ids| g.reshape(ids[0], &[a, 2 * b])),
                        Box::new(|xs| xs[0].clone()),
                    )
                }
                "add" | "sub" | "mul" => {
                    let shape = [r.random_range(1..5), r.random_range(1..7)];
                    let f: fn(f64, f64) -> f64 = match op {
                        "add" => |a, b| a + b,
                        "sub" => |a, b| a - b,
                        _ => |a, b| a * b,
                    };
                    let name = op;
                    (
                        vec![rand_tensor(&mut r, &shape, -2.0, 2.0), rand_tensor(&mut r, &shape, -2.0, 2.0)],
                        Box::new(move |g, ids| match name {
                            "add" => g.add(ids[0], ids[1]),
                            "sub" => g.sub(ids[0], ids[1]),
                            _ => g.mul(ids[0], ids[1]),
                        }),
                        Box::new(move |xs| xs[0].iter().zip(&xs[1]).map(|(a, b)| f(*a, *b)).collect()),
                    )
                }
                "scale" => {
                    let factor = r.random_range(-3.0f32..3.0);
                    (
                        vec![rand_tensor(&mut r, &[3, 4], -1.0, 1.0)],
                        Box::new(move |g, ids| Ok(g.scale(ids[0], factor))),
                        Box::new(move |xs| xs[0].iter().map(|v| v * factor as f64).collect()),
                    )
                }
                "add_const" => {
                    let k = rand_tensor(&mut r, &[2, 5], -1.0, 1.0);
                    let kr = f64s(&k);
                    (
                        vec![rand_tensor(&mut r, &[2, 5], -1.0, 1.0)],
                        Box::new(move |g, ids| g.add_const(ids[0], &k)),
                        Box::new(move |xs| xs[0].iter().zip(&kr).map(|(a, b)| a + b).collect()),
                    )
                }
                "mse" => {
                    let shape = [r.random_range(1..4), r.random_range(1..6)];
                    (
                        vec![rand_tensor(&mut r, &shape, -1.0, 1.0), rand_tensor(&mut r, &shape, -1.0, 1.0)],
                        Box::new(|g, ids| g.mse_loss(ids[0], ids[1])),
                        Box::new(|xs| vec![ref_mse(&xs[0], &xs[1])]),
                    )
                }
                _ => {
                    // conv3 -> avgpool2 -> reshape -> fc -> mse
                    let (b, ci, co, hw, fo) = (2, 2, 3, 4, 3);
                    let flat = co * (hw / 2) * (hw / 2);
                    (
                        vec![
                            rand_tensor(&mut r, &[b, ci, hw, hw], -1.0, 1.0),
                            rand_tensor(&mut r, &[co, ci, 3, 3], -1.0, 1.0),
                            rand_tensor(&mut r, &[flat, fo], -1.0, 1.0),
                            rand_tensor(&mut r, &[b, fo], -1.0, 1.0),
                        ],
                        Box::new(move |g, ids| {
                            let c = g.conv3(ids[0], ids[1], None)?;
                            let p = g.avgpool2(c)?;
                            let f = g.reshape(p, &[b, flat])?;
                            let y = g.fc(f, ids[2], None)?;
                            g.mse_loss(y, ids[3])
                        }),
                        Box::new(move |xs| {
                            let c = ref_conv(&xs[0], &xs[1], None, [b, ci, co, hw, hw]);
                            let p = ref_pool(&c, [b, co, hw, hw]);
                            let y = ref_fc(&p, &xs[2], None, b, flat, fo);
                            vec![ref_mse(&y, &xs[3])]
                        }),
                    )
                }
            };
            let (w, n) = fd_trial(&mut r, &inputs, &build, &reference).map_err(|e| format!("{op}: {e}"))?;
            trials += 1;
            coords += n;
            if w > worst {
                worst = w;
                worst_op = op;
            }
        }
    }

    // Heaviside backward against the surrogate formula, pointwise.
    let mut h_worst = 0.0f64;
    for _ in 0..50 {
        let a = r.random_range(0.5f32..6.0);
        let v_th = r.random_range(0.25f32..1.5);
        let params = SurrogateParams::new(a, v_th).map_err(err)?;
        let x = rand_tensor(&mut r, &[4, 16], v_th - 2.0, v_th + 2.0);
        let up = rand_tensor(&mut r, &[4, 16], -1.0, 1.0);
        let mut g = Graph::new();
        let id = g.parameter(x.clone());
        let s = g.heaviside(id, params);
        for (sv, xv) in g.value(s).data().iter().zip(x.data()) {
            ensure(*sv == if *xv > v_th { 1.0 } else { 0.0 }, || "heaviside forward is not a strict step".into())?;
        }
        g.backward_with(s, up.clone()).map_err(err)?;
        let grad = g.grad(id).ok_or("no heaviside gradient")?;
        for ((gv, xv), uv) in grad.data().iter().zip(x.data()).zip(up.data()) {
            let want = *uv as f64 * ref_surrogate(*xv as f64, a as f64, v_th as f64);
            h_worst = h_worst.max((*gv as f64 - want).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(trials >= 100, || format!("only {trials} trials"))?;
    ensure(worst <= 1e-3, || format!("max rel err {worst:.3e} ({worst_op})"))?;
    ensure(h_worst <= 1e-6, || format!("heaviside backward off by {h_worst:.3e}"))?;
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{trials} trials / {coords} coordinates, max rel err {worst:.2e} ({worst_op}); heaviside max abs err {h_worst:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// C2

fn c2_surrogate() -> Check {
    let mut notes = Vec::new();
    for (a, v_th) in [(3.0f32, 1.0f32), (1.0, 1.0), (5.0, 0.5), (10.0, 1.0), (0.5, 2.0)] {
        let p = SurrogateParams::new(a, v_th).map_err(err)?;
        let peak = p.derivative(v_th) as f64;
        ensure((peak - a as f64 / 2.0).abs() <= 1e-6, || format!("a={a}: peak {peak}"))?;
        let mut asym = 0.0f64;
        for k in 1..=2048 {
            let d = k as f32 / 256.0;
            asym = asym.max((p.derivative(v_th + d) as f64 - p.derivative(v_th - d) as f64).abs());
        }
        ensure(asym <= 1e-6, || format!("a={a}: asymmetry {asym:.3e}"))?;
        // Simpson's rule: fine grid near the peak, coarse in the tails
        let simpson = |lo: f64, hi: f64, n: usize| {
            let h = (hi - lo) / n as f64;
            let f = |x: f64| p.derivative((v_th as f64 + x) as f32) as f64;
            let mut s = f(lo) + f(hi);
            for i in 1..n {
                s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        };
        let core = 20.0 / a as f64;
        let tail = 2.0e5 / a as f64;
        let integral = simpson(-core, core, 200_000) + 2.0 * simpson(core, tail, 2_000_000);
        ensure((integral - 1.0).abs() <= 1e-3, || format!("a={a}: integral {integral:.6}"))?;
        notes.push(format!("a={a}: ∫={integral:.5}"));
    }
    Ok(format!("peak a/2, symmetry <= 1e-6; {}", notes.join(", ")))
}

// ---------------------------------------------------------------------------
// C3

fn c3_renorm() -> Check {
    let mut r = rng(3);
    let (mut mean_err, mut range_err, mut boundary_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let n = r.random_range(2..500);
        let scale = 10f32.powf(r.random_range(-2.0..2.0));
        let shift = r.random_range(-5.0f32..5.0);
        let a = rand_tensor(&mut r, &[n], -1.0, 1.0).map(|v| v * scale + shift);
        let alpha = if r.random_bool(0.3) { [2.0, 3.0, 4.0, 8.0][r.random_range(0..4)] } else { r.random_range(2.0f32..20.0) };
        let beta = r.random_range(-0.5f32..1.5);
        let p = RenormParams::new(alpha, beta).map_err(err)?;
        let out = renormalize_potential(&a, &p);
        let (b, half) = (beta as f64, 1.0 / alpha as f64);
        mean_err = mean_err.max((out.mean() - b).abs());
        let dev = out.data().iter().map(|&v| (v as f64 - b).abs()).fold(0.0, f64::max);
        range_err = range_err.max(dev - half);
        boundary_err = boundary_err.max((dev - half).abs());
    }
    ensure(mean_err <= 1e-5, || format!("mean off by {mean_err:.3e}"))?;
    ensure(range_err <= 1e-6, || format!("range exceeded by {range_err:.3e}"))?;
    ensure(boundary_err <= 1e-6, || format!("no element on the boundary ({boundary_err:.3e})"))?;

    for c in [0.0f32, 1.0, -3.5, 1e4] {
        let out = renormalize_potential(&Tensor::full(&[3, 7], c), &RenormParams::new(4.0, 0.5).map_err(err)?);
        ensure(out.data().iter().all(|&v| v == 0.5), || format!("constant {c} did not map to beta"))?;
    }

    let mut affine = 0.0f32;
    for _ in 0..100 {
        let n = r.random_range(3..200);
        let a = rand_tensor(&mut r, &[n], -5.0, 5.0);
        let (s, t) = (r.random_range(0.1f32..10.0), r.random_range(-10.0f32..10.0));
        let p = RenormParams::default();
        affine = affine.max(renormalize_potential(&a, &p).max_abs_diff(&renormalize_potential(&a.map(|v| s * v + t), &p)));
    }
    ensure(affine <= 1e-5, || format!("affine invariance off by {affine:.3e}"))?;

    let hand = renormalize_potential(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), &RenormParams::default());
    let want = [0.25f32, 0.5, 0.75];
    let hand_err = hand.data().iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    ensure(hand_err <= 1e-6, || format!("[1,2,3] -> {:?}", hand.data()))?;
    Ok(format!(
        "200 random: mean err {mean_err:.1e}, boundary err {boundary_err:.1e}; affine {affine:.1e}; [1,2,3] -> {:?}",
        hand.data()
    ))
}

// ---------------------------------------------------------------------------
// C4

/// One neuron, stepped by the update equations written out literally.
struct ScalarNeuron {
    v: f32,
}

impl ScalarNeuron {
    fn step(&mut self, injection: f32, input: f32, v_th: f32, v_reset: f32) -> f32 {
        let h = injection + input;
        let s = if h > v_th { 1.0f32 } else { 0.0 };
        self.v = h * (1.0 - s) + v_reset * s;
        s
    }
}

fn c4_lif() -> Check {
    let mut r = rng(4);
    let mut worst = 0.0f32;
    let mut ties = 0usize;
    let mut spikes = 0usize;
    for seq in 0..1000 {
        let n = r.random_range(1..17);
        let len = r.random_range(1..41);
        let lambda = r.random_range(0.0f32..=1.0);
        let v_th = [1.0f32, 0.5, 0.75][seq % 3];
        let v_reset = [0.0f32, -0.25, 0.25][(seq / 3) % 3];
        let params = LIFParams::new(lambda, v_th, v_reset).map_err(err)?;
        let leaky = seq % 2 == 0;
        let grid = seq % 4 < 2;
        let mut state = LIFState::resting(&[1, n]);
        let mut neurons: Vec<ScalarNeuron> = (0..n).map(|_| ScalarNeuron { v: 0.0 }).collect();
        for _ in 0..len {
            let mut draw = |lo: f32, hi: f32| {
                if grid {
                    r.random_range((lo * 8.0) as i32..(hi * 8.0) as i32) as f32 / 8.0
                } else {
                    r.random_range(lo..hi)
                }
            };
            let input: Vec<f32> = (0..n).map(|_| draw(-1.0, 2.0)).collect();
            let inj: Vec<f32> = (0..n).map(|_| draw(0.0, 1.0)).collect();
            let it = Tensor::new(&[1, n], input.clone()).unwrap();
            let (s, next) = if leaky {
                lif_step_leaky(&state, &params, &it).map_err(err)?
            } else {
                lif_step(&state, &params, &it, &Tensor::new(&[1, n], inj.clone()).unwrap()).map_err(err)?
            };
            for i in 0..n {
                let injection = if leaky { lambda * neurons[i].v } else { inj[i] };
                if injection + input[i] == v_th {
                    ties += 1;
                }
                let sr = neurons[i].step(injection, input[i], v_th, v_reset);
                spikes += sr as usize;
                worst = worst.max((s.data()[i] - sr).abs()).max((next.v.data()[i] - neurons[i].v).abs());
            }
            state = next;
        }
    }
    ensure(worst <= 1e-6, || format!("max abs diff {worst:.3e}"))?;

    let p = LIFParams::new(0.5, 1.0, 0.0).map_err(err)?;
    let at_threshold = Tensor::new(&[1, 3], vec![0.5, 1.0, 0.0]).unwrap();
    let (s, _) = lif_step(&LIFState::resting(&[1, 3]), &p, &at_threshold, &Tensor::new(&[1, 3], vec![0.5, 0.0, 1.0]).unwrap())
        .map_err(err)?;
    ensure(s.data().iter().all(|&v| v == 0.0), || "H == v_th fired".into())?;
    let primed = LIFState {
        v: Tensor::full(&[1, 1], 1.0),
    };
    let (s, _) = lif_step_leaky(&primed, &p, &Tensor::full(&[1, 1], 0.5)).map_err(err)?;
    ensure(s.data()[0] == 0.0, || "leaky H == v_th fired".into())?;
    Ok(format!("1000 sequences, max abs diff {worst:.1e}, {spikes} spikes, {ties} exact threshold ties, none fired"))
}

// ---------------------------------------------------------------------------
// Shared fixtures for C5/C6

struct Fixture {
    spec: NetworkSpec,
    params: noisnn::arch::ParamSet,
    images: Tensor,
    labels: Vec<u8>,
    source: String,
}

fn mnist_dir() -> PathBuf {
    data_root().join("mnist")
}

fn fashion_dir() -> PathBuf {
    data_root().join("fashion-mnist")
}

fn have(dir: &Path) -> bool {
    dataio::load_standard(dir, Split::Test).is_ok()
}

fn cached_model_path(family: NoiseFamily, seed: u64) -> PathBuf {
    cache_dir().join("models").join(format!("{family}-seed{seed}.nsnn"))
}

/// A trained default-architecture model and the evaluation images when available,
/// otherwise a freshly initialized default-architecture net on random images.
fn fixture(n: usize) -> Fixture {
    let cached = dataio::load_checkpoint(cached_model_path(NoiseFamily::Gaussian, 0));
    let test = dataio::load_standard(mnist_dir(), Split::Test);
    if let (Ok(ckpt), Ok(test)) = (cached, test) {
        let ds = test.head(n);
        return Fixture {
            spec: ckpt.spec,
            params: ckpt.params,
            images: ds.images,
            labels: ds.labels,
            source: format!("trained model, {n} MNIST test images"),
        };
    }
    let spec = parse_arch(DEFAULT_ARCH, &[1, 28, 28]).unwrap();
    let params = init_params(&spec, &mut SeedTree::new(11).simple(Purpose::Init, 0));
    let mut r = rng(50);
    Fixture {
        spec,
        params,
        images: rand_tensor(&mut r, &[n, 1, 28, 28], 0.0, 1.0),
        labels: (0..n).map(|i| (i % 10) as u8).collect(),
        source: format!("untrained model, {n} random images"),
    }
}

fn payload(bytes: &[u8]) -> &[u8] {
    let hl = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    &bytes[13 + hl..bytes.len() - 8]
}

// ---------------------------------------------------------------------------
// C5

fn c5_conversion() -> Check {
    let f = fixture(64);
    let mut compared = 0;
    for seed in [0u64, 7, 123] {
        for (start, end) in [(0, 64), (10, 29)] {
            let x = f.images.rows(start, end);
            let keys = NoiseKeys::eval(seed, start as u64);
            let s1 = runtime::evaluate(&f.params, &f.spec, &x, &RunMode::stage1(), &keys, EvalOptions::default()).map_err(err)?;
            let s2 = runtime::evaluate(&f.params, &f.spec, &x, &RunMode::stage2(1), &keys, EvalOptions::default()).map_err(err)?;
            ensure(bits_equal(&s1.averaged_output, &s2.averaged_output), || {
                format!("seed {seed}: stage-2 T=1 differs from stage 1")
            })?;
            compared += s1.averaged_output.len();
        }
    }

    let ckpt = Checkpoint::new(f.spec.clone(), f.params.clone(), 5).map_err(err)?;
    let original = encode_checkpoint(&ckpt).map_err(err)?;
    let s3 = runtime::convert(&ckpt, RunMode::stage3(10, RenormParams::default())).map_err(err)?;
    let s3_bytes = encode_checkpoint(&decode_checkpoint(&encode_checkpoint(&s3).map_err(err)?).map_err(err)?).map_err(err)?;
    ensure(payload(&s3_bytes) == payload(&original), || "stage-3 payload differs".into())?;
    let back = runtime::convert(&decode_checkpoint(&s3_bytes).map_err(err)?, RunMode::stage1()).map_err(err)?;
    let back_bytes = encode_checkpoint(&back).map_err(err)?;
    ensure(back_bytes == original, || "round trip changed the file".into())?;
    Ok(format!(
        "{compared} outputs bitwise equal ({}); 1 -> 3 -> 1 payload byte-identical ({} bytes)",
        f.source,
        payload(&original).len()
    ))
}

// ---------------------------------------------------------------------------
// Stage-3 evaluation with injection tracking, shared by C6 and C8-C10

#[derive(Debug, Clone, Copy)]
struct Curve {
    acc_t1: f64,
    acc_tmax: f64,
    inj_min: f32,
    inj_max: f32,
}

fn stage3_curve(ckpt: &Checkpoint, ds: &Dataset, renorm: &RenormParams, eval_seed: u64) -> noisnn::Result<Curve> {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    let (mut c1, mut ct) = (0usize, 0usize);
    let mut start = 0;
    while start < ds.len() {
        let end = (start + EVAL_BATCH).min(ds.len());
        let mut probe = |_: usize, _: usize, inj: &Tensor| {
            for &v in inj.data() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        };
        let r = runtime::forward_stage3(
            &ckpt.params,
            &ckpt.spec,
            &ds.images.rows(start, end),
            T_MAX,
            renorm,
            &NoiseKeys::eval(eval_seed, start as u64),
            EvalOptions {
                keep_steps: true,
                injection_probe: Some(&mut probe),
            },
        )?;
        let steps = r.per_step_outputs.as_ref().expect("kept steps");
        let labels = &ds.labels[start..end];
        let hits = |p: Vec<usize>| p.iter().zip(labels).filter(|(p, &l)| **p == l as usize).count();
        c1 += hits(runtime::prefix_average(steps, 1)?.argmax_rows());
        ct += hits(r.predictions.clone());
        start = end;
    }
    Ok(Curve {
        acc_t1: c1 as f64 / ds.len() as f64,
        acc_tmax: ct as f64 / ds.len() as f64,
        inj_min: lo,
        inj_max: hi,
    })
}

struct Lab {
    train: Option<Dataset>,
    eval: Option<Dataset>,
    models: HashMap<(NoiseFamily, u64), Checkpoint>,
    curves: HashMap<(NoiseFamily, u64, u32), Curve>,
}

impl Lab {
    fn new() -> Self {
        let train = dataio::load_standard(mnist_dir(), Split::Train)
            .and_then(|full| experiments::training_subset(&full, VALIDATION_HOLDOUT, Some(TRAIN_SUBSET)))
            .ok();
        let eval = dataio::load_standard(mnist_dir(), Split::Test).ok().map(|d| d.head(EVAL_IMAGES));
        Lab {
            train,
            eval,
            models: HashMap::new(),
            curves: HashMap::new(),
        }
    }

    fn ready(&self) -> bool {
        self.train.is_some() && self.eval.is_some()
    }

    fn protocol(family: NoiseFamily, seed: u64) -> noisnn::Result<TrainProtocol> {
        let mut p = TrainProtocol::default_net(TRAIN_EPOCHS, seed);
        p.noise = NoiseSpec::from_range(family, 0.0, 1.0)?;
        Ok(p)
    }

    fn model(&mut self, family: NoiseFamily, seed: u64) -> noisnn::Result<&Checkpoint> {
        if !self.models.contains_key(&(family, seed)) {
            let train = self.train.as_ref().expect("training data");
            let protocol = Self::protocol(family, seed)?;
            let spec = protocol.spec(train.image_shape())?;
            let path = cached_model_path(family, seed);
            let usable = |c: &Checkpoint| {
                c.spec == spec
                    && c.seed == seed
                    && c.metadata.get("epochs").map(String::as_str) == Some(&TRAIN_EPOCHS.to_string())
                    && c.metadata.get("train_images").map(String::as_str) == Some(&train.len().to_string())
            };
            let ckpt = match dataio::load_checkpoint(&path) {
                Ok(c) if usable(&c) => c,
                _ => {
                    eprintln!("training {family} seed {seed} ({} images, {TRAIN_EPOCHS} epochs)", train.len());
                    let (c, _) = experiments::train_model(&protocol, train, |m| {
                        eprintln!("  epoch {:>2}  loss {:.5}  acc {:.4}  {:.1}s", m.epoch, m.loss, m.acc, m.seconds)
                    })?;
                    let dir = path.parent().unwrap();
                    fs::create_dir_all(dir).map_err(|source| noisnn::Error::Io {
                        path: dir.to_path_buf(),
                        source,
                    })?;
                    dataio::save_checkpoint(&c, &path)?;
                    c
                }
            };
            self.models.insert((family, seed), ckpt);
        }
        Ok(&self.models[&(family, seed)])
    }

    fn curve(&mut self, family: NoiseFamily, seed: u64, alpha: f32) -> noisnn::Result<Curve> {
        let key = (family, seed, alpha.to_bits());
        if let Some(c) = self.curves.get(&key) {
            return Ok(*c);
        }
        let renorm = RenormParams::new(alpha, 0.5)?;
        self.model(family, seed)?;
        let c = stage3_curve(&self.models[&(family, seed)], self.eval.as_ref().unwrap(), &renorm, seed)?;
        eprintln!(
            "  {family} seed {seed} alpha {alpha}: T=1 {:.4}  T={T_MAX} {:.4}",
            c.acc_t1, c.acc_tmax
        );
        self.curves.insert(key, c);
        Ok(c)
    }
}

// ---------------------------------------------------------------------------
// C6

fn c6_decomposition(lab: &mut Lab) -> Check {
    let defaults = RenormParams::default();
    let (curve, source) = if lab.ready() && cached_model_path(NoiseFamily::Gaussian, 0).exists() {
        (lab.curve(NoiseFamily::Gaussian, 0, defaults.alpha).map_err(err)?, format!("{EVAL_IMAGES} MNIST test images"))
    } else {
        let f = fixture(512);
        let ckpt = Checkpoint::new(f.spec, f.params, 0).map_err(err)?;
        let ds = Dataset::new(f.images, f.labels, Split::Test).map_err(err)?;
        (stage3_curve(&ckpt, &ds, &defaults, 0).map_err(err)?, f.source)
    };
    ensure(curve.inj_min >= 0.0 && curve.inj_max <= 1.0, || {
        format!("injection spans [{}, {}]", curve.inj_min, curve.inj_max)
    })?;

    let f = fixture(48);
    let two = RenormParams::new(2.0, 0.5).map_err(err)?;
    let residual = residual_noise_spec(&f.spec.noise, &two).map_err(err)?;
    ensure(residual.half_range == 0.0, || format!("alpha=2 leaves residual noise {residual:?}"))?;
    let run = |renorm: &RenormParams, seed: u64| {
        runtime::forward_stage3(&f.params, &f.spec, &f.images, 6, renorm, &NoiseKeys::eval(seed, 0), EvalOptions::default())
    };
    let a = run(&two, 1).map_err(err)?;
    let b = run(&two, 99).map_err(err)?;
    ensure(bits_equal(&a.averaged_output, &b.averaged_output), || "alpha=2 depends on the noise seed".into())?;

    let inf = RenormParams::new(f32::INFINITY, 0.5).map_err(err)?;
    for seed in [3u64, 4] {
        let s3 = run(&inf, seed).map_err(err)?;
        let s2 = runtime::forward_stage2(&f.params, &f.spec, &f.images, 6, &NoiseKeys::eval(seed, 0), EvalOptions::default())
            .map_err(err)?;
        ensure(bits_equal(&s3.averaged_output, &s2.averaged_output), || "alpha=inf differs from stage 2".into())?;
    }
    Ok(format!(
        "injection in [{:.4}, {:.4}] over {source}, T={T_MAX}; alpha=2 seed-independent; alpha=inf == stage 2",
        curve.inj_min, curve.inj_max
    ))
}

// ---------------------------------------------------------------------------
// C7

fn oracle_idx(images: &[u8], labels: &[u8], n: usize) -> (Vec<[usize; 3]>, Vec<Vec<u8>>, Vec<u8>) {
    let be = |b: &[u8], at: usize| u32::from_be_bytes(b[at..at + 4].try_into().unwrap()) as usize;
    assert_eq!(&images[..4], &[0, 0, 8, 3]);
    assert_eq!(&labels[..4], &[0, 0, 8, 1]);
    let (count, rows, cols) = (be(images, 4), be(images, 8), be(images, 12));
    assert_eq!(count, be(labels, 4));
    let px = rows * cols;
    let recs = (0..n.min(count)).map(|i| images[16 + i * px..16 + (i + 1) * px].to_vec()).collect();
    (vec![[count, rows, cols]], recs, labels[8..8 + n.min(count)].to_vec())
}

fn write_idx(dir: &Path, images: &[Vec<u8>], labels: &[u8], rows: usize, cols: usize) -> (PathBuf, PathBuf) {
    let mut ib = vec![0u8, 0, 8, 3];
    for d in [images.len(), rows, cols] {
        ib.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for im in images {
        ib.extend_from_slice(im);
    }
    let mut lb = vec![0u8, 0, 8, 1];
    lb.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lb.extend_from_slice(labels);
    let (ip, lp) = (dir.join("images-idx3-ubyte"), dir.join("labels-idx1-ubyte"));
    fs::write(&ip, &ib).unwrap();
    fs::write(&lp, &lb).unwrap();
    (ip, lp)
}

fn c7_io() -> Check {
    let mut notes = Vec::new();
    let tmp = tempfile::tempdir().map_err(err)?;

    // checkpoint: bytes -> model -> bytes, through memory and disk
    let f = fixture(1);
    let mut ckpt = Checkpoint::new(f.spec.clone(), f.params.clone(), 77).map_err(err)?;
    ckpt.metadata.insert("note".into(), "acceptance".into());
    let mut sizes = 0;
    for mode in [RunMode::stage1(), RunMode::stage2(5), RunMode::stage3(10, RenormParams::default())] {
        let c = runtime::convert(&ckpt, mode).map_err(err)?;
        let bytes = encode_checkpoint(&c).map_err(err)?;
        let back = decode_checkpoint(&bytes).map_err(err)?;
        ensure(back == c, || "decoded checkpoint differs".into())?;
        ensure(encode_checkpoint(&back).map_err(err)? == bytes, || "re-encoding changed bytes".into())?;
        let path = tmp.path().join("m.nsnn");
        dataio::save_checkpoint(&c, &path).map_err(err)?;
        ensure(fs::read(&path).map_err(err)? == bytes, || "file bytes differ".into())?;
        ensure(dataio::load_checkpoint(&path).map_err(err)? == c, || "file load differs".into())?;
        sizes = bytes.len();
    }
    // corruption: flips across the header, payload and checksum, plus truncation
    let bytes = encode_checkpoint(&ckpt).map_err(err)?;
    let mut r = rng(7);
    let mut flips = 0;
    for i in 0..200 {
        let at = match i {
            0..=9 => i,
            10..=19 => bytes.len() - 1 - (i - 10),
            _ => r.random_range(0..bytes.len()),
        };
        let mut bad = bytes.clone();
        bad[at] ^= 1 << r.random_range(0..8);
        ensure(decode_checkpoint(&bad).is_err(), || format!("flip at byte {at} not detected"))?;
        flips += 1;
    }
    for cut in [0, 5, 12, bytes.len() / 2, bytes.len() - 1] {
        ensure(decode_checkpoint(&bytes[..cut]).is_err(), || format!("truncation to {cut} not detected"))?;
    }
    notes.push(format!("checkpoint {sizes} bytes byte-exact, {flips} flips + 5 truncations detected"));

    // IDX: encode -> parse -> encode
    let mut r = rng(8);
    let recs: Vec<Vec<u8>> = (0..25).map(|_| (0..6 * 5).map(|_| r.random::<u8>()).collect()).collect();
    let labels: Vec<u8> = (0..25).map(|i| (i * 7 % 10) as u8).collect();
    let (ip, lp) = write_idx(tmp.path(), &recs, &labels, 6, 5);
    let ds = dataio::load_idx(&ip, &lp).map_err(err)?;
    ensure(ds.images.shape() == [25, 1, 6, 5], || format!("shape {:?}", ds.images.shape()))?;
    ensure(ds.labels == labels, || "labels differ".into())?;
    let re: Vec<Vec<u8>> = (0..25).map(|i| ds.images.row(i).iter().map(|&v| (v * 255.0).round() as u8).collect()).collect();
    ensure(re == recs, || "pixels did not survive the round trip".into())?;
    let sub = tmp.path().join("again");
    fs::create_dir(&sub).map_err(err)?;
    let (ip2, lp2) = write_idx(&sub, &re, &ds.labels, 6, 5);
    ensure(fs::read(&ip).map_err(err)? == fs::read(&ip2).map_err(err)?, || "image file bytes differ".into())?;
    ensure(fs::read(&lp).map_err(err)? == fs::read(&lp2).map_err(err)?, || "label file bytes differ".into())?;
    let mut broken = fs::read(&ip).map_err(err)?;
    broken.pop();
    fs::write(&ip, &broken).map_err(err)?;
    ensure(dataio::load_idx(&ip, &lp).is_err(), || "truncated IDX accepted".into())?;
    notes.push("IDX byte-exact".into());

    // real files against a direct parse of the first 100 records
    for dir in [mnist_dir(), fashion_dir()] {
        let (Ok(ib), Ok(lb)) = (
            fs::read(dir.join("train-images-idx3-ubyte")),
            fs::read(dir.join("train-labels-idx1-ubyte")),
        ) else {
            continue;
        };
        let (_, recs, labels) = oracle_idx(&ib, &lb, 100);
        let ds = dataio::load_standard(&dir, Split::Train).map_err(err)?;
        for (i, rec) in recs.iter().enumerate() {
            let ok = ds.images.row(i).iter().zip(rec).all(|(&v, &b)| v == b as f32 / 255.0);
            ensure(ok && ds.labels[i] == labels[i], || format!("{}: record {i} differs", dir.display()))?;
        }
        notes.push(format!("{} first 100 match", dir.file_name().unwrap().to_string_lossy()));
    }
    Ok(notes.join("; "))
}

// ---------------------------------------------------------------------------
// C8-C10

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn gains(lab: &mut Lab, family: NoiseFamily, alpha: f32) -> noisnn::Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Vec::new();
    let mut last = Vec::new();
    for s in SEEDS {
        let c = lab.curve(family, s, alpha)?;
        g.push(c.acc_tmax - c.acc_t1);
        last.push(c.acc_tmax);
    }
    Ok((g, last))
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:+.4}")).collect::<Vec<_>>().join(" ")
}

fn c8_t_sweep(lab: &mut Lab) -> Check {
    let (g, last) = gains(lab, NoiseFamily::Gaussian, 4.0).map_err(err)?;
    let m = mean(&g);
    ensure(m >= 0.003, || format!("mean gain {m:+.4} < 0.003 (per seed {})", fmt_list(&g)))?;
    Ok(format!(
        "mean stage-3 acc T=1 -> T={T_MAX} gain {m:+.4} (per seed {}); mean acc at T={T_MAX} {:.4}",
        fmt_list(&g),
        mean(&last)
    ))
}

fn c9_alpha(lab: &mut Lab) -> Check {
    let (g2, _) = gains(lab, NoiseFamily::Gaussian, 2.0).map_err(err)?;
    let (g4, _) = gains(lab, NoiseFamily::Gaussian, 4.0).map_err(err)?;
    let mut finals = Vec::new();
    for alpha in [3.0f32, 4.0, 8.0] {
        finals.push(mean(&gains(lab, NoiseFamily::Gaussian, alpha).map_err(err)?.1));
    }
    let spread = finals.iter().cloned().fold(f64::MIN, f64::max) - finals.iter().cloned().fold(f64::MAX, f64::min);
    let detail = format!(
        "gain alpha=2 {:+.4} vs alpha=4 {:+.4}; T={T_MAX} acc alpha=3/4/8 {:.4}/{:.4}/{:.4} (spread {spread:.4})",
        mean(&g2),
        mean(&g4),
        finals[0],
        finals[1],
        finals[2]
    );
    ensure(mean(&g2) < mean(&g4), || format!("alpha=2 gain not smaller: {detail}"))?;
    ensure(spread <= 0.01, || format!("spread too wide: {detail}"))?;
    Ok(detail)
}

fn c10_noise(lab: &mut Lab) -> Check {
    let (gg, lg) = gains(lab, NoiseFamily::Gaussian, 4.0).map_err(err)?;
    let (gu, lu) = gains(lab, NoiseFamily::Uniform, 4.0).map_err(err)?;
    let detail = format!(
        "gain gaussian {:+.4}, uniform {:+.4}; T={T_MAX} gap gaussian - uniform {:+.4}",
        mean(&gg),
        mean(&gu),
        mean(&lg) - mean(&lu)
    );
    ensure(mean(&gg) > 0.0 && mean(&gu) > 0.0, || format!("non-positive gain: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// C11

fn c11_speed() -> Check {
    let full = dataio::load_standard(fashion_dir(), Split::Train).map_err(err)?;
    let train = experiments::training_subset(&full, VALIDATION_HOLDOUT, Some(BENCH_TRAIN_IMAGES)).map_err(err)?;
    let eval = dataio::load_standard(fashion_dir(), Split::Test).map_err(err)?.head(BENCH_EVAL_IMAGES);
    let mut protocol = TrainProtocol::default_net(BENCH_MAX_EPOCHS, 0);
    protocol.train.lr0 = BENCH_LR;
    let settings = BenchSettings {
        target_acc: BENCH_TARGET_ACC,
        budget_seconds: BENCH_BUDGET_SECONDS,
        steps: T_MAX,
        renorm: RenormParams::default(),
        max_epochs: BENCH_MAX_EPOCHS,
        eval_batch: EVAL_BATCH,
    };
    let log = |arm: &'static str| {
        move |e: usize, s: f64, acc: f64| eprintln!("  {arm:<6} epoch {e:>2}  train {s:7.1}s  acc {acc:.4}")
    };
    let ours = experiments::bench_ours(&protocol, &train, &eval, &settings, log("ours")).map_err(err)?;
    let direct = experiments::bench_direct(&protocol, &train, &eval, &settings, log("direct")).map_err(err)?;
    let (Some(a), Some(b)) = (ours.seconds_to_target, direct.seconds_to_target) else {
        return Err(format!(
            "target {BENCH_TARGET_ACC} not reached: ours {:?} after {} epochs, direct {:?} after {} epochs",
            ours.seconds_to_target, ours.epochs, direct.seconds_to_target, direct.epochs
        ));
    };
    let detail = format!(
        "to acc {BENCH_TARGET_ACC}: ours {a:.1}s ({} epochs), direct T={T_MAX} {b:.1}s ({} epochs), ratio {:.2}x; per-epoch ratio {:.2}x",
        ours.epochs,
        direct.epochs,
        b / a,
        direct.mean_epoch_seconds() / ours.mean_epoch_seconds()
    );
    ensure(a <= b / 2.5, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// C12

fn c12_extended() -> Check {
    let full = dataio::load_standard(mnist_dir(), Split::Train).map_err(err)?;
    let test = dataio::load_standard(mnist_dir(), Split::Test).map_err(err)?;
    let protocol = TrainProtocol::default_net(100, 0);
    let (ckpt, _) = experiments::train_model(&protocol, &full, |m| {
        eprintln!("  epoch {:>3}  loss {:.5}  acc {:.4}  {:.1}s", m.epoch, m.loss, m.acc, m.seconds)
    })
    .map_err(err)?;
    fs::create_dir_all(cache_dir().join("models")).map_err(err)?;
    dataio::save_checkpoint(&ckpt, cache_dir().join("models/extended.nsnn")).map_err(err)?;
    let acc = experiments::accuracy_curve(&ckpt, &test, Stage::Stateful, &RenormParams::default(), &[5], 0, EVAL_BATCH)
        .map_err(err)?[0];
    ensure(acc >= 0.99, || format!("stage-3 T=5 test acc {acc:.4} < 0.99"))?;
    Ok(format!("stage-3 T=5 test acc {acc:.4}"))
}

// ---------------------------------------------------------------------------

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn guarded(f: impl FnOnce() -> Check) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => Outcome::Pass(s),
        Ok(Err(s)) => Outcome::Fail(s),
        Err(p) => Outcome::Fail(format!(
            "panicked: {}",
            p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
        )),
    }
}

fn main() {
    let extended = std::env::args().any(|a| a == "--extended");
    let quick = std::env::var_os("NOISNN_ACCEPT_QUICK").is_some();
    let mut lab = Lab::new();
    let data_note = if lab.ready() { None } else { Some(format!("MNIST not found under {}", data_root().display())) };
    let quant_skip = || -> Option<String> {
        if quick {
            Some("NOISNN_ACCEPT_QUICK is set".into())
        } else {
            data_note.clone()
        }
    };

    let mut results: Vec<(&str, &str, Outcome, f64)> = Vec::new();
    let mut record = |id: &'static str, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let o = f();
        let secs = t0.elapsed().as_secs_f64();
        let (tag, msg) = match &o {
            Outcome::Pass(m) => ("PASS", m),
            Outcome::Fail(m) => ("FAIL", m),
            Outcome::Skip(m) => ("SKIP", m),
        };
        println!("{tag} {id:<3} {name}: {msg} [{secs:.1}s]");
        results.push((id, name, o, secs));
    };

    record("C1", "gradient fidelity", &mut || guarded(c1_gradients));
    record("C2", "surrogate properties", &mut || guarded(c2_surrogate));
    record("C3", "renormalization exactness", &mut || guarded(c3_renorm));
    record("C4", "LIF oracle equivalence", &mut || guarded(c4_lif));
    record("C5", "lossless conversion", &mut || guarded(c5_conversion));
    record("C6", "decomposition closure", &mut || guarded(|| c6_decomposition(&mut lab)));
    record("C7", "checkpoint and IDX round trips", &mut || guarded(c7_io));
    for (id, name, f) in [
        ("C8", "T-sweep gain", c8_t_sweep as fn(&mut Lab) -> Check),
        ("C9", "alpha ablation shape", c9_alpha),
        ("C10", "noise-family ablation", c10_noise),
    ] {
        record(id, name, &mut || match quant_skip() {
            Some(why) => Outcome::Skip(why),
            None => guarded(|| f(&mut lab)),
        });
    }
    record("C11", "training-speed ratio", &mut || {
        if quick {
            Outcome::Skip("NOISNN_ACCEPT_QUICK is set".into())
        } else if !have(&fashion_dir()) {
            Outcome::Skip(format!("Fashion-MNIST not found under {}", data_root().display()))
        } else {
            guarded(c11_speed)
        }
    });
    record("C12", "extended full-MNIST accuracy", &mut || {
        if !extended {
            Outcome::Skip("run with --extended".into())
        } else if data_note.is_some() {
            Outcome::Skip(data_note.clone().unwrap())
        } else {
            guarded(c12_extended)
        }
    });

    let failed: Vec<&str> = results.iter().filter(|r| matches!(r.2, Outcome::Fail(_))).map(|r| r.0).collect();
    let passed = results.iter().filter(|r| matches!(r.2, Outcome::Pass(_))).count();
    let skipped = results.iter().filter(|r| matches!(r.2, Outcome::Skip(_))).count();
    println!("acceptance: {passed} passed, {} failed, {skipped} skipped", failed.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
