use crate::error::{Error, Result};

/// Square binary attention mask; `true` means "may attend".
///
/// Every row keeps at least one attendable position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(n: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n * n {
            return Err(Error::ShapeMismatch(format!(
                "mask of size {n} needs {} entries, got {}",
                n * n,
                allowed.len()
            )));
        }
        for row in 0..n {
            if !allowed[row * n..(row + 1) * n].iter().any(|&a| a) {
                return Err(Error::InvalidMask { row });
            }
        }
        Ok(Self { n, allowed })
    }

    pub fn full(n: usize) -> Self {
        Self {
            n,
            allowed: vec![true; n * n],
        }
    }

    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allowed[i * n + j] = true;
            }
        }
        Self { n, allowed }
    }

    pub fn diagonal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            allowed[i * n + i] = true;
        }
        Self { n, allowed }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.n..(i + 1) * self.n]
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&a| a).count()
    }

    /// One text line per row, `1` for attend and `.` for blocked.
    pub fn to_grid(&self) -> String {
        let mut s = String::with_capacity(self.n * (self.n + 1));
        for i in 0..self.n {
            for &a in self.row(i) {
                s.push(if a { '1' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_row() {
        let err = AttentionMask::new(2, vec![true, false, false, false]).unwrap_err();
        assert!(matches!(err, Error::InvalidMask { row: 1 }));
    }

    #[test]
    fn causal_grid() {
        assert_eq!(AttentionMask::causal(3).to_grid(), "1..\n11.\n111\n");
    }
}
