//! Natural-image priors on raw pixel arrays of any `C × H × W` shape.

use ndarray::{s, Array3, ArrayView3};

/// Sum of squared differences between horizontally and vertically adjacent
/// pixels, over all channels.
pub fn tv_prior(x: ArrayView3<f64>) -> f64 {
    let dx = &x.slice(s![.., .., 1..]) - &x.slice(s![.., .., ..-1]);
    let dy = &x.slice(s![.., 1.., ..]) - &x.slice(s![.., ..-1, ..]);
    dx.iter().map(|d| d * d).sum::<f64>() + dy.iter().map(|d| d * d).sum::<f64>()
}

pub fn tv_prior_grad(x: ArrayView3<f64>) -> Array3<f64> {
    let mut g = Array3::zeros(x.dim());
    let dx = &x.slice(s![.., .., 1..]) - &x.slice(s![.., .., ..-1]);
    let dy = &x.slice(s![.., 1.., ..]) - &x.slice(s![.., ..-1, ..]);
    {
        let mut right = g.slice_mut(s![.., .., 1..]);
        right.scaled_add(2.0, &dx);
    }
    {
        let mut left = g.slice_mut(s![.., .., ..-1]);
        left.scaled_add(-2.0, &dx);
    }
    {
        let mut down = g.slice_mut(s![.., 1.., ..]);
        down.scaled_add(2.0, &dy);
    }
    {
        let mut up = g.slice_mut(s![.., ..-1, ..]);
        up.scaled_add(-2.0, &dy);
    }
    g
}

/// Squared Frobenius norm.
pub fn l2_prior(x: ArrayView3<f64>) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn l2_prior_grad(x: ArrayView3<f64>) -> Array3<f64> {
    x.mapv(|v| 2.0 * v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn tv_examples() {
        assert_eq!(tv_prior(Array3::from_elem((3, 4, 5), 2.5).view()), 0.0);
        let (a, b) = (1.5, -2.0);
        assert_eq!(tv_prior(array![[[a, b]]].view()), (b - a) * (b - a));
        // 1×2×2: horizontal (2-1)² + (4-3)², vertical (3-1)² + (4-2)²
        assert_eq!(tv_prior(array![[[1.0, 2.0], [3.0, 4.0]]].view()), 10.0);
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_prior(Array3::zeros((3, 2, 2)).view()), 0.0);
        assert_eq!(l2_prior(array![[[1.0, -2.0]], [[3.0, 0.5]]].view()), 14.25);
    }

    #[test]
    fn tv_grad_matches_finite_differences() {
        let x = Array3::from_shape_fn((2, 3, 4), |(c, y, x)| ((c * 7 + y * 3 + x * 5) % 7) as f64 * 0.3);
        let g = tv_prior_grad(x.view());
        let h = 1e-4;
        for idx in ndarray::indices(x.dim()) {
            let mut p = x.clone();
            p[idx] += h;
            let mut m = x.clone();
            m[idx] -= h;
            let fd = (tv_prior(p.view()) - tv_prior(m.view())) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-6, "{idx:?}");
        }
    }
}
