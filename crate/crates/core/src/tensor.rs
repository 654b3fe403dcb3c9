//! Dense row-major tensors, up to four axes (batch x channel x height x width).

use crate::error::{CoreError, Result};

/// A dense tensor of `f32` values. Feature maps use the axis order
/// `B x C x H x W`; flattened activations use `B x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 4 {
            return Err(CoreError::InvalidConfig(format!(
                "tensor rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        if n != data.len() {
            return Err(CoreError::LengthMismatch {
                context: format!("tensor shape {:?} vs data", shape),
                left: n,
                right: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// View as `(B, C, H, W)`. Rank-2 tensors are treated as `B x C x 1 x 1`,
    /// rank-3 as a single-sample `1 x C x H x W`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            [b, c, h, w] => Ok((*b, *c, *h, *w)),
            [c, h, w] => Ok((1, *c, *h, *w)),
            [b, c] => Ok((*b, *c, 1, 1)),
            other => Err(CoreError::InvalidConfig(format!(
                "cannot view shape {:?} as B x C x H x W",
                other
            ))),
        }
    }

    /// View as `(rows, cols)` for matrix-shaped tensors.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(CoreError::InvalidConfig(format!(
                "cannot view shape {:?} as rows x cols",
                other
            ))),
        }
    }

    #[inline]
    pub fn idx4(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        let (_, cc, hh, ww) = (
            self.shape[0],
            self.shape[1],
            *self.shape.get(2).unwrap_or(&1),
            *self.shape.get(3).unwrap_or(&1),
        );
        ((b * cc + c) * hh + h) * ww + w
    }

    /// Extract sample `b` of a batched tensor as a rank-3 `C x H x W` tensor.
    pub fn sample(&self, b: usize) -> Result<Tensor> {
        let (bs, c, h, w) = self.dims4()?;
        if b >= bs {
            return Err(CoreError::InvalidConfig(format!(
                "sample index {} out of range for batch {}",
                b, bs
            )));
        }
        let n = c * h * w;
        let data = self.data[b * n..(b + 1) * n].to_vec();
        Tensor::new(vec![c, h, w], data)
    }

    /// Stack rank-3 samples with identical shapes into one `B x C x H x W` batch.
    pub fn stack(samples: &[Tensor]) -> Result<Tensor> {
        let first = samples
            .first()
            .ok_or_else(|| CoreError::EmptyInput("stack of zero samples".into()))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::with_capacity(samples.len() * c * h * w);
        for s in samples {
            let (_, sc, sh, sw) = s.dims4()?;
            if (sc, sh, sw) != (c, h, w) {
                return Err(CoreError::LengthMismatch {
                    context: "stack: sample shapes differ".into(),
                    left: c * h * w,
                    right: sc * sh * sw,
                });
            }
            data.extend_from_slice(s.data());
        }
        Tensor::new(vec![samples.len(), c, h, w], data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(CoreError::NonFinite(what.to_string()))
        }
    }
}

/// Row-wise argmax of a `B x C` tensor.
pub fn argmax_rows(t: &Tensor) -> Result<Vec<usize>> {
    let (rows, cols) = t.dims2()?;
    if cols == 0 {
        return Err(CoreError::EmptyInput("argmax over zero columns".into()));
    }
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &t.data()[r * cols..(r + 1) * cols];
        let mut best = 0usize;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        out.push(best);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn stack_and_sample_round_trip() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let batch = Tensor::stack(&[a.clone(), b]).unwrap();
        assert_eq!(batch.shape(), &[2, 1, 2, 2]);
        assert_eq!(batch.sample(0).unwrap().data(), a.data());
        assert_eq!(batch.sample(1).unwrap().data()[3], 8.0);
    }

    #[test]
    fn argmax_picks_first_on_tie() {
        let t = Tensor::new(vec![2, 3], vec![0.0, 1.0, 1.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(argmax_rows(&t).unwrap(), vec![1, 0]);
    }
}
