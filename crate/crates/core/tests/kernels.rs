use rand::RngExt;

use dmgan::rng;
use dmgan::tensor::kernels::{self, ConvShape, Exec};

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Zero-padded 3×3 cross-correlation, one output at a time.
fn conv_naive(s: ConvShape, x: &[f64], k: &[f64], bias: &[f64]) -> Vec<f64> {
    let (ho, wo) = (s.out_h(), s.out_w());
    let mut out = vec![0.0; s.c_out * ho * wo];
    for co in 0..s.c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias[co];
                for ci in 0..s.c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * s.stride + ky) as isize - 1;
                            let ix = (ox * s.stride + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                continue;
                            }
                            let xv = x[(ci * s.h + iy as usize) * s.w + ix as usize];
                            acc += xv * k[((co * s.c_in + ci) * 3 + ky) * 3 + kx];
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

fn shapes() -> Vec<ConvShape> {
    let mut v = Vec::new();
    for (c_in, c_out, h, w) in [(1, 1, 1, 1), (2, 3, 5, 4), (3, 2, 8, 8), (4, 5, 7, 9)] {
        for stride in [1, 2] {
            v.push(ConvShape { c_in, c_out, h, w, stride });
        }
    }
    v
}

#[test]
fn conv_matches_naive_loops() {
    for (i, s) in shapes().into_iter().enumerate() {
        let x = random(s.c_in * s.h * s.w, i as u64);
        let k = random(s.c_out * s.c_in * 9, 100 + i as u64);
        let b = random(s.c_out, 200 + i as u64);
        let mut out = vec![0.0; s.c_out * s.out_h() * s.out_w()];
        kernels::conv3x3_forward(Exec::Sequential, s, &x, &k, &b, &mut out);
        let want = conv_naive(s, &x, &k, &b);
        let err = out.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{s:?}: {err:e}");
    }
}

#[test]
fn conv_gradients_are_adjoint() {
    // without bias, <conv(x; k), g> = <x, dx> = <k, dk>
    for (i, s) in shapes().into_iter().enumerate() {
        let n_out = s.c_out * s.out_h() * s.out_w();
        let x = random(s.c_in * s.h * s.w, i as u64);
        let k = random(s.c_out * s.c_in * 9, 100 + i as u64);
        let g = random(n_out, 300 + i as u64);
        let zero = vec![0.0; s.c_out];
        let y = conv_naive(s, &x, &k, &zero);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();

        let mut dx = vec![0.0; x.len()];
        kernels::conv3x3_grad_input(Exec::Sequential, s, &g, &k, &mut dx);
        let via_x: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let (mut dk, mut db) = (vec![0.0; k.len()], vec![0.0; s.c_out]);
        kernels::conv3x3_grad_kernel(Exec::Sequential, s, &g, &x, &mut dk, &mut db);
        let via_k: f64 = dk.iter().zip(&k).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10 && (lhs - via_k).abs() < 1e-10, "{s:?}");
        let per_channel: Vec<f64> = g.chunks(n_out / s.c_out).map(|c| c.iter().sum()).collect();
        assert_eq!(db, per_channel);
    }
}

#[test]
fn matmul_matches_naive_loops() {
    let (m, k, p) = (7, 5, 6);
    let a = random(m * k, 1);
    let b = random(k * p, 2);
    let mut out = vec![0.0; m * p];
    kernels::matmul(Exec::Sequential, &a, &b, m, k, p, &mut out);
    for i in 0..m {
        for j in 0..p {
            let want: f64 = (0..k).map(|t| a[i * k + t] * b[t * p + j]).sum();
            assert!((out[i * p + j] - want).abs() < 1e-12);
        }
    }
}

#[cfg(feature = "parallel")]
#[test]
fn parallel_kernels_are_bit_identical() {
    let s = ConvShape { c_in: 16, c_out: 24, h: 32, w: 32, stride: 1 };
    let x: Vec<f32> = random(s.c_in * s.h * s.w, 1).into_iter().map(|v| v as f32).collect();
    let k: Vec<f32> = random(s.c_out * s.c_in * 9, 2).into_iter().map(|v| v as f32).collect();
    let b: Vec<f32> = random(s.c_out, 3).into_iter().map(|v| v as f32).collect();
    let n_out = s.c_out * s.h * s.w;
    let g: Vec<f32> = random(n_out, 4).into_iter().map(|v| v as f32).collect();
    let ma: Vec<f32> = random(96 * 128, 5).into_iter().map(|v| v as f32).collect();
    let mb: Vec<f32> = random(128 * 80, 6).into_iter().map(|v| v as f32).collect();
    let run = |e: Exec| {
        let mut y = vec![0.0f32; n_out];
        kernels::conv3x3_forward(e, s, &x, &k, &b, &mut y);
        let mut dx = vec![0.0f32; x.len()];
        kernels::conv3x3_grad_input(e, s, &g, &k, &mut dx);
        let (mut dk, mut db) = (vec![0.0f32; k.len()], vec![0.0f32; s.c_out]);
        kernels::conv3x3_grad_kernel(e, s, &g, &x, &mut dk, &mut db);
        let mut mm = vec![0.0f32; 96 * 80];
        kernels::matmul(e, &ma, &mb, 96, 128, 80, &mut mm);
        (y, dx, dk, db, mm)
    };
    let (seq, par) = (run(Exec::Sequential), run(Exec::Parallel));
    let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&seq.0), bits(&par.0));
    assert_eq!(bits(&seq.1), bits(&par.1));
    assert_eq!(bits(&seq.2), bits(&par.2));
    assert_eq!(bits(&seq.3), bits(&par.3));
    assert_eq!(bits(&seq.4), bits(&par.4));
}
