//! Reductions split over eight independent accumulators so the compiler can
//! vectorize them. The summation order is fixed, so results do not depend
//! on threading.

use super::Scalar;

#[inline]
fn fold8<S: Scalar>(acc: [S; 8], tail: S) -> S {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        let x: &[S; 8] = x.try_into().expect("chunk of 8");
        let y: &[S; 8] = y.try_into().expect("chunk of 8");
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = S::zero();
    for (&x, &y) in ar.iter().zip(br) {
        tail += x * y;
    }
    fold8(acc, tail)
}

pub(crate) fn sum<S: Scalar>(a: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let ac = a.chunks_exact(8);
    let ar = ac.remainder();
    for x in ac {
        let x: &[S; 8] = x.try_into().expect("chunk of 8");
        for l in 0..8 {
            acc[l] += x[l];
        }
    }
    fold8(acc, ar.iter().copied().sum())
}

/// `sum((a - m)^2)`.
pub(crate) fn sq_dev<S: Scalar>(a: &[S], m: S) -> S {
    let mut acc = [S::zero(); 8];
    let ac = a.chunks_exact(8);
    let ar = ac.remainder();
    for x in ac {
        let x: &[S; 8] = x.try_into().expect("chunk of 8");
        for l in 0..8 {
            let d = x[l] - m;
            acc[l] += d * d;
        }
    }
    fold8(acc, ar.iter().map(|&v| (v - m) * (v - m)).sum())
}
