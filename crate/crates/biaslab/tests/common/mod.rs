//! Shared oracles for the integration and acceptance suites. Everything
//! here is independent of the library's computation paths: direct loops,
//! finite differences, Floyd–Warshall.

use biaslab::autodiff::{NodeId, Tape};
use biaslab::tensor::Tensor;

pub struct Xorshift(pub u64);

impl Xorshift {
    pub fn new(seed: u64) -> Self {
        Xorshift(seed.max(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    /// Uniform in [0, 1).
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.unit() * (hi - lo)
    }

    /// Uniform magnitude in [0.1, 1.1) with random sign: keeps values away
    /// from relu/maxpool kinks so central differences stay valid.
    pub fn away_from_kinks(&mut self) -> f64 {
        let mag = 0.1 + self.unit();
        if self.next_u64() & 1 == 0 {
            mag
        } else {
            -mag
        }
    }
}

/// Relative error with an absolute floor.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
}

/// Check the tape gradient of a scalar graph against central finite
/// differences over every element of every input, at step `h`.
///
/// `build` must construct the scalar output from the given input leaves
/// (recreated per probe evaluation).
pub fn gradcheck<F>(build: &F, inputs: &[Tensor], h: f64, tol: f64, what: &str)
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let eval = |probe: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = probe.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &leaves);
        tape.value(out).item().expect("scalar graph")
    };

    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &leaves);
    let grads = tape.backward(out, &leaves).expect("backward");

    for (which, input) in inputs.iter().enumerate() {
        let analytic = tape.value(grads[&leaves[which]]).data().to_vec();
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = rel_err(analytic[i], numeric);
            assert!(
                err <= tol,
                "{what}: input {which} element {i}: analytic {} vs numeric {} (rel err {err:.3e})",
                analytic[i],
                numeric
            );
        }
    }
}

/// Direct quadruple-loop stride-1 same-padded convolution over NHWC input
/// `[n, h, w, c]` and kernel `[kh, kw, c, co]`, accumulating in the same
/// (di, dj, c) order as an im2col matmul row.
pub fn conv2d_reference(x: &Tensor, k: &Tensor) -> Tensor {
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, _, co) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; n * h * w * co];
    for nn in 0..n {
        for i in 0..h {
            for j in 0..w {
                for o in 0..co {
                    let mut acc = 0.0;
                    for di in 0..kh {
                        let si = i as isize + di as isize - ph as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for dj in 0..kw {
                            let sj = j as isize + dj as isize - pw as isize;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            for cc in 0..c {
                                let xv = xd[((nn * h + si as usize) * w + sj as usize) * c + cc];
                                let kv = kd[((di * kw + dj) * c + cc) * co + o];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((nn * h + i) * w + j) * co + o] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, h, w, co], out).expect("reference conv shape")
}

/// All-pairs shortest paths by Floyd–Warshall over an explicit adjacency.
pub fn floyd_warshall(n: usize, edges: &[(usize, usize, f64)]) -> Vec<f64> {
    let mut d = vec![f64::INFINITY; n * n];
    for i in 0..n {
        d[i * n + i] = 0.0;
    }
    for &(i, j, w) in edges {
        if w < d[i * n + j] {
            d[i * n + j] = w;
            d[j * n + i] = w;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i * n + k] + d[k * n + j];
                if via < d[i * n + j] {
                    d[i * n + j] = via;
                }
            }
        }
    }
    d
}

/// Brute-force symmetric k-NN edge list (union rule, Euclidean weights),
/// mirroring the library's tie rule: sort by (distance, index).
pub fn knn_edges(points: &Tensor, k: usize) -> Vec<(usize, usize, f64)> {
    let n = points.rows();
    let dist = |i: usize, j: usize| -> f64 {
        points
            .row(i)
            .iter()
            .zip(points.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut edges = Vec::new();
    for i in 0..n {
        let mut ds: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist(i, j), j)).collect();
        ds.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(w, j) in ds.iter().take(k) {
            edges.push((i, j, w));
        }
    }
    edges
}
