//! Inner loops of the EM E-step over one fixed point and its candidate
//! centroids.
//!
//! Every kernel has an AVX2 path and a portable path. Both perform the same
//! per-lane operations in the same order without fused multiply-add, so they
//! return bit-identical results.

use nalgebra::Vector3;

const MAGIC: f64 = 6755399441055744.0; // 1.5·2^52
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
/// Taylor coefficients of exp to degree 12, highest first. Enough for |f| ≤ ln2/2.
const EXP_COEFFS: [f64; 13] = [
    1.0 / 479001600.0,
    1.0 / 39916800.0,
    1.0 / 3628800.0,
    1.0 / 362880.0,
    1.0 / 40320.0,
    1.0 / 5040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    0.5,
    1.0,
    1.0,
];

/// exp(r) for r in [-700, 0], within a few ulp.
#[inline(always)]
pub(super) fn exp_shifted(r: f64) -> f64 {
    let t = r * std::f64::consts::LOG2_E + MAGIC;
    let n = t - MAGIC;
    let n_bits = t.to_bits().wrapping_sub(MAGIC.to_bits());
    let f = r - n * LN2_HI - n * LN2_LO;
    let mut p = EXP_COEFFS[0];
    for &c in &EXP_COEFFS[1..] {
        p = p * f + c;
    }
    p * f64::from_bits(n_bits.wrapping_add(1023).wrapping_shl(52))
}

/// Candidate centroids as structure-of-arrays, padded to a multiple of 4.
pub(super) struct Lanes {
    len: usize,
    tx: Vec<f64>,
    ty: Vec<f64>,
    tz: Vec<f64>,
    mx: Vec<f64>,
    my: Vec<f64>,
    mz: Vec<f64>,
}

impl Lanes {
    /// `transformed` holds the current centroid positions, `moving` the
    /// untransformed ones that enter the M-step sums.
    pub(super) fn gather(
        cand: &[usize],
        transformed: &[Vector3<f64>],
        moving: &[Vector3<f64>],
    ) -> Self {
        let padded = cand.len().div_ceil(4) * 4;
        // Padding sits far away so its terms vanish.
        let far = 1e150;
        let col = |f: &dyn Fn(usize) -> f64, pad: f64| {
            let mut v: Vec<f64> = cand.iter().map(|&j| f(j)).collect();
            v.resize(padded, pad);
            v
        };
        Lanes {
            len: padded,
            tx: col(&|j| transformed[j].x, far),
            ty: col(&|j| transformed[j].y, far),
            tz: col(&|j| transformed[j].z, far),
            mx: col(&|j| moving[j].x, 0.0),
            my: col(&|j| moving[j].y, 0.0),
            mz: col(&|j| moving[j].z, 0.0),
        }
    }

    pub(super) fn len(&self) -> usize {
        self.len
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(super) enum Isa {
    Portable,
    #[cfg(target_arch = "x86_64")]
    Avx2,
}

impl Isa {
    pub(super) fn detect() -> Isa {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            return Isa::Avx2;
        }
        Isa::Portable
    }

    /// Fills `a` with -|x - t|²/k and returns its maximum.
    pub(super) fn neg_scaled_sq_dist(
        self,
        lanes: &Lanes,
        x: &Vector3<f64>,
        inv_k: f64,
        a: &mut [f64],
    ) -> f64 {
        assert_eq!(a.len(), lanes.len);
        match self {
            Isa::Portable => portable::neg_scaled_sq_dist(lanes, x, inv_k, a),
            // SAFETY: Avx2 is only constructed after runtime detection.
            #[cfg(target_arch = "x86_64")]
            Isa::Avx2 => unsafe { avx2::neg_scaled_sq_dist(lanes, x, inv_k, a) },
        }
    }

    /// e_i = exp(max(a_i - amax, lowest)) where a_i > floor, else 0. Returns Σ e_i.
    pub(super) fn exp_above(
        self,
        a: &[f64],
        amax: f64,
        lowest: f64,
        floor: f64,
        e: &mut [f64],
    ) -> f64 {
        assert_eq!(a.len(), e.len());
        assert_eq!(a.len() % 4, 0);
        match self {
            Isa::Portable => portable::exp_above(a, amax, lowest, floor, e),
            // SAFETY: as above.
            #[cfg(target_arch = "x86_64")]
            Isa::Avx2 => unsafe { avx2::exp_above(a, amax, lowest, floor, e) },
        }
    }

    /// For p = e·inv_den adds p into `p1` and returns Σp, Σp·m (x, y, z) and Σp·a.
    pub(super) fn accumulate(
        self,
        lanes: &Lanes,
        e: &[f64],
        a: &[f64],
        inv_den: f64,
        p1: &mut [f64],
    ) -> [f64; 5] {
        assert!(e.len() == lanes.len && a.len() == lanes.len && p1.len() == lanes.len);
        match self {
            Isa::Portable => portable::accumulate(lanes, e, a, inv_den, p1),
            // SAFETY: as above.
            #[cfg(target_arch = "x86_64")]
            Isa::Avx2 => unsafe { avx2::accumulate(lanes, e, a, inv_den, p1) },
        }
    }
}

#[inline(always)]
fn max4(b: [f64; 4]) -> f64 {
    b[0].max(b[1]).max(b[2].max(b[3]))
}

#[inline(always)]
fn sum4(s: [f64; 4]) -> f64 {
    (s[0] + s[1]) + (s[2] + s[3])
}

mod portable {
    use super::*;

    pub(super) fn neg_scaled_sq_dist(
        lanes: &Lanes,
        x: &Vector3<f64>,
        inv_k: f64,
        a: &mut [f64],
    ) -> f64 {
        let mut best = [f64::NEG_INFINITY; 4];
        let rows = lanes
            .tx
            .chunks_exact(4)
            .zip(lanes.ty.chunks_exact(4))
            .zip(lanes.tz.chunks_exact(4));
        for (((tx, ty), tz), out) in rows.zip(a.chunks_exact_mut(4)) {
            for l in 0..4 {
                let dx = x.x - tx[l];
                let dy = x.y - ty[l];
                let dz = x.z - tz[l];
                let v = -(dx * dx + dy * dy + dz * dz) * inv_k;
                out[l] = v;
                best[l] = if v > best[l] { v } else { best[l] };
            }
        }
        max4(best)
    }

    pub(super) fn exp_above(a: &[f64], amax: f64, lowest: f64, floor: f64, e: &mut [f64]) -> f64 {
        let mut s = [0.0f64; 4];
        for (a, e) in a.chunks_exact(4).zip(e.chunks_exact_mut(4)) {
            for l in 0..4 {
                let d = a[l] - amax;
                let r = exp_shifted(if d > lowest { d } else { lowest });
                let r = if a[l] > floor { r } else { 0.0 };
                e[l] = r;
                s[l] += r;
            }
        }
        sum4(s)
    }

    pub(super) fn accumulate(
        lanes: &Lanes,
        e: &[f64],
        a: &[f64],
        inv_den: f64,
        p1: &mut [f64],
    ) -> [f64; 5] {
        let mut s = [[0.0f64; 4]; 5];
        let rows = lanes
            .mx
            .chunks_exact(4)
            .zip(lanes.my.chunks_exact(4))
            .zip(lanes.mz.chunks_exact(4))
            .zip(e.chunks_exact(4).zip(a.chunks_exact(4)));
        for ((((mx, my), mz), (e, a)), p1) in rows.zip(p1.chunks_exact_mut(4)) {
            for l in 0..4 {
                let p = e[l] * inv_den;
                p1[l] += p;
                s[0][l] += p;
                s[1][l] += p * mx[l];
                s[2][l] += p * my[l];
                s[3][l] += p * mz[l];
                s[4][l] += p * a[l];
            }
        }
        s.map(sum4)
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use super::*;
    use std::arch::x86_64::*;

    #[inline(always)]
    unsafe fn lanes_of(v: __m256d) -> [f64; 4] {
        let mut out = [0.0; 4];
        _mm256_storeu_pd(out.as_mut_ptr(), v);
        out
    }

    #[inline(always)]
    unsafe fn load(s: &[f64], i: usize) -> __m256d {
        _mm256_loadu_pd(s.as_ptr().add(i))
    }

    #[inline(always)]
    unsafe fn store(s: &mut [f64], i: usize, v: __m256d) {
        _mm256_storeu_pd(s.as_mut_ptr().add(i), v)
    }

    #[inline(always)]
    unsafe fn exp_shifted(r: __m256d) -> __m256d {
        let magic = _mm256_set1_pd(MAGIC);
        let t = _mm256_add_pd(
            _mm256_mul_pd(r, _mm256_set1_pd(std::f64::consts::LOG2_E)),
            magic,
        );
        let n = _mm256_sub_pd(t, magic);
        let n_bits = _mm256_sub_epi64(
            _mm256_castpd_si256(t),
            _mm256_set1_epi64x(MAGIC.to_bits() as i64),
        );
        let f = _mm256_sub_pd(
            _mm256_sub_pd(r, _mm256_mul_pd(n, _mm256_set1_pd(LN2_HI))),
            _mm256_mul_pd(n, _mm256_set1_pd(LN2_LO)),
        );
        let mut p = _mm256_set1_pd(EXP_COEFFS[0]);
        for &c in &EXP_COEFFS[1..] {
            p = _mm256_add_pd(_mm256_mul_pd(p, f), _mm256_set1_pd(c));
        }
        let scale = _mm256_slli_epi64::<52>(_mm256_add_epi64(n_bits, _mm256_set1_epi64x(1023)));
        _mm256_mul_pd(p, _mm256_castsi256_pd(scale))
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn neg_scaled_sq_dist(
        lanes: &Lanes,
        x: &Vector3<f64>,
        inv_k: f64,
        a: &mut [f64],
    ) -> f64 {
        let (px, py, pz) = (
            _mm256_set1_pd(x.x),
            _mm256_set1_pd(x.y),
            _mm256_set1_pd(x.z),
        );
        let sign = _mm256_set1_pd(-0.0);
        let ik = _mm256_set1_pd(inv_k);
        let mut best = _mm256_set1_pd(f64::NEG_INFINITY);
        for i in (0..lanes.len).step_by(4) {
            let dx = _mm256_sub_pd(px, load(&lanes.tx, i));
            let dy = _mm256_sub_pd(py, load(&lanes.ty, i));
            let dz = _mm256_sub_pd(pz, load(&lanes.tz, i));
            let s = _mm256_add_pd(
                _mm256_add_pd(_mm256_mul_pd(dx, dx), _mm256_mul_pd(dy, dy)),
                _mm256_mul_pd(dz, dz),
            );
            let v = _mm256_mul_pd(_mm256_xor_pd(s, sign), ik);
            store(a, i, v);
            // v > best ? v : best
            best = _mm256_max_pd(v, best);
        }
        max4(lanes_of(best))
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn exp_above(
        a: &[f64],
        amax: f64,
        lowest: f64,
        floor: f64,
        e: &mut [f64],
    ) -> f64 {
        let (vmax, vlow, vfloor) = (
            _mm256_set1_pd(amax),
            _mm256_set1_pd(lowest),
            _mm256_set1_pd(floor),
        );
        let mut s = _mm256_setzero_pd();
        for i in (0..a.len()).step_by(4) {
            let v = load(a, i);
            // d > lowest ? d : lowest
            let d = _mm256_max_pd(_mm256_sub_pd(v, vmax), vlow);
            let keep = _mm256_cmp_pd::<_CMP_GT_OQ>(v, vfloor);
            let r = _mm256_and_pd(exp_shifted(d), keep);
            store(e, i, r);
            s = _mm256_add_pd(s, r);
        }
        sum4(lanes_of(s))
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn accumulate(
        lanes: &Lanes,
        e: &[f64],
        a: &[f64],
        inv_den: f64,
        p1: &mut [f64],
    ) -> [f64; 5] {
        let inv = _mm256_set1_pd(inv_den);
        let mut s = [_mm256_setzero_pd(); 5];
        for i in (0..lanes.len).step_by(4) {
            let p = _mm256_mul_pd(load(e, i), inv);
            store(p1, i, _mm256_add_pd(load(p1, i), p));
            s[0] = _mm256_add_pd(s[0], p);
            s[1] = _mm256_add_pd(s[1], _mm256_mul_pd(p, load(&lanes.mx, i)));
            s[2] = _mm256_add_pd(s[2], _mm256_mul_pd(p, load(&lanes.my, i)));
            s[3] = _mm256_add_pd(s[3], _mm256_mul_pd(p, load(&lanes.mz, i)));
            s[4] = _mm256_add_pd(s[4], _mm256_mul_pd(p, load(a, i)));
        }
        s.map(|v| sum4(lanes_of(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shifted_exp_matches_std() {
        for i in 0..=200_000 {
            let r = -41.0 * i as f64 / 200_000.0;
            let (got, want) = (exp_shifted(r), r.exp());
            assert!(((got - want) / want).abs() < 4e-16, "{r}: {got} vs {want}");
        }
        assert_eq!(exp_shifted(0.0), 1.0);
    }

    /// The vector path must agree bit for bit with the portable one.
    #[test]
    fn isa_paths_agree() {
        let isa = Isa::detect();
        let pts: Vec<Vector3<f64>> = (0..37)
            .map(|i| {
                Vector3::new(
                    (i * 7 % 13) as f64,
                    (i * 5 % 11) as f64 * 0.7,
                    i as f64 * 0.3,
                )
            })
            .collect();
        let cand: Vec<usize> = (0..pts.len()).collect();
        let lanes = Lanes::gather(&cand, &pts, &pts);
        let n = lanes.len();
        let x = Vector3::new(2.0, 3.5, 4.0);
        let run = |isa: Isa| {
            let (mut a, mut e, mut p1) = (vec![0.0; n], vec![0.0; n], vec![0.5; n]);
            let amax = isa.neg_scaled_sq_dist(&lanes, &x, 1.0 / 9.0, &mut a);
            let s = isa.exp_above(&a, amax, -41.0, amax - 30.0, &mut e);
            let acc = isa.accumulate(&lanes, &e, &a, 1.0 / s, &mut p1);
            (a, e, p1, amax, s, acc)
        };
        let want = run(Isa::Portable);
        let got = run(isa);
        assert_eq!(format!("{want:?}"), format!("{got:?}"));
        assert!(want.4 > 1.0);
    }
}
