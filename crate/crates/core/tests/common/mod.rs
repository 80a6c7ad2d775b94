//! Independent reference implementations: plain loops over `Vec<Vec<f64>>`
//! rows, parameters read from a store by name. Nothing here goes through the
//! tape.

#![allow(dead_code)]

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtpca::nn::ParamStore;
use rtpca::tensor::Tensor;
use rtpca::tpca::{Amplification, Compression, TpcaConfig};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Rows of the `[n, d]` slice `index` of a `[.., n, d]` tensor.
pub fn rows(t: &Tensor<f64>, index: usize) -> Mat {
    let s = t.shape();
    let (n, d) = (s[s.len() - 2], s[s.len() - 1]);
    t.data()[index * n * d..(index + 1) * n * d]
        .chunks(d)
        .map(<[f64]>::to_vec)
        .collect()
}

pub fn max_diff(a: &Mat, b: &[f64]) -> f64 {
    a.iter()
        .flatten()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn param(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    store
        .by_name(name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .clone()
}

pub fn linear(store: &ParamStore<f64>, name: &str, x: &Mat) -> Mat {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|o| b.data()[o] + (0..din).map(|i| row[i] * w.data()[i * dout + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layer_norm(store: &ParamStore<f64>, name: &str, x: &Mat) -> Mat {
    let g = param(store, &format!("{name}.gamma"));
    let b = param(store, &format!("{name}.beta"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * g.data()[i] + b.data()[i])
                .collect()
        })
        .collect()
}

pub fn gelu(x: &Mat) -> Mat {
    x.iter()
        .map(|r| {
            r.iter()
                .map(|&v| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt())))
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Bin `i` of `m` over `n` rows is `[floor(i·n/m), ceil((i+1)·n/m))`.
pub fn pool(x: &Mat, m: usize) -> Mat {
    let n = x.len();
    (0..m)
        .map(|i| {
            let lo = (i * n) as f64 / m as f64;
            let hi = ((i + 1) * n) as f64 / m as f64;
            let (lo, hi) = (lo.floor() as usize, hi.ceil() as usize);
            let d = x[0].len();
            (0..d)
                .map(|c| (lo..hi).map(|t| x[t][c]).sum::<f64>() / (hi - lo) as f64)
                .collect()
        })
        .collect()
}

/// `kernel [k, d_in, d_out]`, windows of `k` rows every `stride` rows.
pub fn conv(x: &Mat, kernel: &Tensor<f64>, bias: &Tensor<f64>, stride: usize) -> Mat {
    let s = kernel.shape();
    let (k, din, dout) = (s[0], s[1], s[2]);
    let len = (x.len() - k) / stride + 1;
    (0..len)
        .map(|i| {
            (0..dout)
                .map(|o| {
                    let mut acc = bias.data()[o];
                    for t in 0..k {
                        for c in 0..din {
                            acc += x[i * stride + t][c] * kernel.data()[(t * din + c) * dout + o];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Scatter form: input row `i` adds `x[i]·K[t]` to output row `i·stride + t`.
pub fn conv_transpose(x: &Mat, kernel: &Tensor<f64>, bias: &Tensor<f64>, stride: usize) -> Mat {
    let s = kernel.shape();
    let (k, din, dout) = (s[0], s[1], s[2]);
    let len = (x.len() - 1) * stride + k;
    let mut out = vec![bias.data().to_vec(); len];
    for (i, row) in x.iter().enumerate() {
        for t in 0..k {
            for c in 0..din {
                for o in 0..dout {
                    out[i * stride + t][o] += row[c] * kernel.data()[(t * din + c) * dout + o];
                }
            }
        }
    }
    out
}

/// The pyramid written out one stage at a time.
pub fn tpca(store: &ParamStore<f64>, name: &str, cfg: &TpcaConfig, z: &Mat) -> Mat {
    let (r, m) = (cfg.ratio, cfg.stages);
    let mut lens = vec![z.len()];
    for _ in 0..m {
        lens.push(lens.last().unwrap().div_ceil(r));
    }
    let mut downs = vec![z.clone()];
    for l in 0..m {
        let prev = &downs[l];
        let c = match cfg.compression {
            Compression::Pool => pool(prev, lens[l + 1]),
            Compression::Conv => conv(
                prev,
                &param(store, &format!("{name}.down{l}.kernel")),
                &param(store, &format!("{name}.down{l}.bias")),
                r,
            ),
        };
        downs.push(gelu(&layer_norm(store, &format!("{name}.down{l}.norm"), &c)));
    }
    let mut up = downs[m].clone();
    for l in 0..m {
        let target = lens[m - 1 - l];
        let mut a = match cfg.amplification {
            Amplification::Linear => {
                let rep: Mat = up.iter().flat_map(|row| std::iter::repeat_n(row.clone(), r)).collect();
                linear(store, &format!("{name}.up{l}.linear"), &rep)
            }
            Amplification::TransConv => conv_transpose(
                &up,
                &param(store, &format!("{name}.up{l}.kernel")),
                &param(store, &format!("{name}.up{l}.bias")),
                r,
            ),
        };
        a.truncate(target);
        up = add(
            &gelu(&layer_norm(store, &format!("{name}.up{l}.norm"), &a)),
            &downs[m - 1 - l],
        );
    }
    up
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Per-head loop over projected `q`, `k`, `v`, then the output projection.
/// Returns the output and `weights[head][query][key]`.
pub fn attend(store: &ParamStore<f64>, name: &str, heads: usize, q: &Mat, k: &Mat, v: &Mat) -> (Mat, Vec<Mat>) {
    let c = q[0].len();
    let dh = c / heads;
    let mut merged = vec![vec![0.0; c]; q.len()];
    let mut all = Vec::new();
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut wh = Vec::new();
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = softmax(&logits);
            for c in cols.clone() {
                merged[i][c] = w.iter().zip(v).map(|(a, vj)| a * vj[c]).sum();
            }
            wh.push(w);
        }
        all.push(wh);
    }
    (linear(store, &format!("{name}.w_o"), &merged), all)
}

pub fn mha(store: &ParamStore<f64>, name: &str, heads: usize, xq: &Mat, xkv: &Mat) -> (Mat, Vec<Mat>) {
    let q = linear(store, &format!("{name}.w_q"), xq);
    let k = linear(store, &format!("{name}.w_k"), xkv);
    let v = linear(store, &format!("{name}.w_v"), xkv);
    attend(store, name, heads, &q, &k, &v)
}

/// One cross-layer attention step: pyramid keys and values of `z`, the
/// pooled previous ones appended, queries untouched. Returns the output and
/// the refined keys and values for the next layer.
#[allow(clippy::too_many_arguments)]
pub fn xlr(
    store: &ParamStore<f64>,
    attn: &str,
    tk: &str,
    tv: &str,
    cfg: &TpcaConfig,
    heads: usize,
    z: &Mat,
    prev: Option<(&Mat, &Mat)>,
    pool_target: usize,
) -> (Mat, Mat, Mat) {
    let q = linear(store, &format!("{attn}.w_q"), z);
    let k_t = tpca(store, tk, cfg, &linear(store, &format!("{attn}.w_k"), z));
    let v_t = tpca(store, tv, cfg, &linear(store, &format!("{attn}.w_v"), z));
    let (mut k, mut v) = (k_t.clone(), v_t.clone());
    if let Some((kp, vp)) = prev {
        k.extend(pool(kp, pool_target));
        v.extend(pool(vp, pool_target));
    }
    let (out, _) = attend(store, attn, heads, &q, &k, &v);
    (out, k_t, v_t)
}

/// Mean Euclidean distance over all rows of `[.., 3]` data.
pub fn mean_dist(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() / 3;
    (0..n)
        .map(|i| {
            (0..3)
                .map(|a| (p[3 * i + a] - g[3 * i + a]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / n as f64
}

/// Similarity alignment of `p` onto `g` through Horn's unit-quaternion
/// solution (largest eigenvector of the 4×4 profile matrix) and the matching
/// optimal scale. Returns the aligned points.
pub fn horn_align(p: &[[f64; 3]], g: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let n = p.len() as f64;
    let mean = |x: &[[f64; 3]]| {
        let mut m = Vector3::zeros();
        for v in x {
            m += Vector3::from(*v);
        }
        m / n
    };
    let (mp, mg) = (mean(p), mean(g));
    let pc: Vec<Vector3<f64>> = p.iter().map(|v| Vector3::from(*v) - mp).collect();
    let gc: Vec<Vector3<f64>> = g.iter().map(|v| Vector3::from(*v) - mg).collect();
    let mut s = Matrix3::zeros();
    for (a, b) in pc.iter().zip(&gc) {
        s += a * b.transpose();
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    #[rustfmt::skip]
    let nmat = Matrix4::new(
        sxx + syy + szz, syz - szy,       szx - sxz,       sxy - syx,
        syz - szy,       sxx - syy - szz, sxy + syx,       szx + sxz,
        szx - sxz,       sxy + syx,       -sxx + syy - szz, syz + szy,
        sxy - syx,       szx + sxz,       syz + szy,       -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(nmat);
    let (imax, lmax) =
        eig.eigenvalues.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, &l)| if l > acc.1 { (i, l) } else { acc },
        );
    let q = eig.eigenvectors.column(imax);
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    #[rustfmt::skip]
    let r = Matrix3::new(
        w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z),         2.0 * (x * z + w * y),
        2.0 * (y * x + w * z),         w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x),
        2.0 * (z * x - w * y),         2.0 * (z * y + w * x),         w * w - x * x - y * y + z * z,
    );
    let norm2: f64 = pc.iter().map(|v| v.norm_squared()).sum();
    let scale = if norm2 > 0.0 { lmax / norm2 } else { 0.0 };
    pc.iter()
        .map(|v| {
            let a = r * v * scale + mg;
            [a[0], a[1], a[2]]
        })
        .collect()
}

/// Rotation about an arbitrary axis.
pub fn rotation(axis: [f64; 3], angle: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(Vector3::from(axis)), angle).into_inner()
}
