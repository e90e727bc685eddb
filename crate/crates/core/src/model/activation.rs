use serde::{Deserialize, Serialize};

/// Shifted sigmoid `sigma(z) = 1 / (1 + exp(b - z))` and its first three
/// derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub shift: f64,
}

impl Default for Activation {
    fn default() -> Self {
        Self { shift: 0.5 }
    }
}

impl Activation {
    pub fn new(shift: f64) -> Self {
        Self { shift }
    }

    #[inline]
    fn logistic(&self, z: f64) -> f64 {
        let u = z - self.shift;
        if u >= 0.0 {
            1.0 / (1.0 + (-u).exp())
        } else {
            let e = u.exp();
            e / (1.0 + e)
        }
    }

    #[inline]
    pub fn value(&self, z: f64) -> f64 {
        self.logistic(z)
    }

    #[inline]
    pub fn d1(&self, z: f64) -> f64 {
        let s = self.logistic(z);
        s * (1.0 - s)
    }

    #[inline]
    pub fn d2(&self, z: f64) -> f64 {
        let s = self.logistic(z);
        s * (1.0 - s) * (1.0 - 2.0 * s)
    }

    #[inline]
    pub fn d3(&self, z: f64) -> f64 {
        let s = self.logistic(z);
        let p = s * (1.0 - s);
        p * (1.0 - 6.0 * p)
    }

    /// Sup-norms of `sigma, sigma', sigma''` over a uniform grid on `[-range, range]`
    /// around the shift.
    pub fn sampled_bounds(&self, range: f64, points: usize) -> [f64; 3] {
        let mut out = [0.0_f64; 3];
        for i in 0..points {
            let z = self.shift - range + 2.0 * range * i as f64 / (points - 1) as f64;
            out[0] = out[0].max(self.value(z).abs());
            out[1] = out[1].max(self.d1(z).abs());
            out[2] = out[2].max(self.d2(z).abs());
        }
        out
    }
}
