use super::sh::num_coeffs;

/// The optimizable scene. Row `i` of every array describes Gaussian `i`.
///
/// Rotations are stored as raw `(w, x, y, z)` quaternions and normalized on
/// use; the optimizer renormalizes them after each step.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub sh_degree: usize,
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    /// `N x (degree+1)^2 x 3`, coefficient-major then channel.
    pub sh_coeffs: Vec<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl GaussianSet {
    pub fn empty(sh_degree: usize) -> Self {
        Self {
            sh_degree,
            positions: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            opacity_logits: Vec::new(),
            sh_coeffs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn coeffs_per_gaussian(&self) -> usize {
        num_coeffs(self.sh_degree)
    }

    /// Number of reals in one row of `sh_coeffs`.
    pub fn sh_stride(&self) -> usize {
        self.coeffs_per_gaussian() * 3
    }

    pub fn sh(&self, i: usize) -> &[f64] {
        let s = self.sh_stride();
        &self.sh_coeffs[i * s..(i + 1) * s]
    }

    pub fn sh_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.sh_stride();
        &mut self.sh_coeffs[i * s..(i + 1) * s]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn scales(&self, i: usize) -> [f64; 3] {
        self.log_scales[i].map(f64::exp)
    }

    pub fn push(
        &mut self,
        position: [f64; 3],
        log_scale: [f64; 3],
        rotation: [f64; 4],
        opacity_logit: f64,
        sh: &[f64],
    ) {
        assert_eq!(sh.len(), self.sh_stride());
        self.positions.push(position);
        self.log_scales.push(log_scale);
        self.rotations.push(rotation);
        self.opacity_logits.push(opacity_logit);
        self.sh_coeffs.extend_from_slice(sh);
    }

    /// Copies row `i` of `other` onto the end of `self`.
    pub fn push_row_from(&mut self, other: &GaussianSet, i: usize) {
        self.push(
            other.positions[i],
            other.log_scales[i],
            other.rotations[i],
            other.opacity_logits[i],
            other.sh(i),
        );
    }

    /// Keeps rows whose flag is true, in order.
    pub fn retain_rows(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let stride = self.sh_stride();
        let mut out = GaussianSet::empty(self.sh_degree);
        for (i, &k) in keep.iter().enumerate() {
            if k {
                out.push_row_from(self, i);
            }
        }
        debug_assert_eq!(out.sh_coeffs.len(), out.len() * stride);
        *self = out;
    }

    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n > 0.0 && n.is_finite() {
                for v in q.iter_mut() {
                    *v /= n;
                }
            } else {
                *q = [1.0, 0.0, 0.0, 0.0];
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().flatten().all(|v| v.is_finite())
            && self.log_scales.iter().flatten().all(|v| v.is_finite())
            && self.rotations.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logits.iter().all(|v| v.is_finite())
            && self.sh_coeffs.iter().all(|v| v.is_finite())
    }

    /// Checks that every array agrees on the row count.
    pub fn is_consistent(&self) -> bool {
        let n = self.len();
        self.log_scales.len() == n
            && self.rotations.len() == n
            && self.opacity_logits.len() == n
            && self.sh_coeffs.len() == n * self.sh_stride()
    }
}
