use crate::error::{Error, Result};

/// Dense rank-2 array laid out `[channels × length]`, row-major by channel.
///
/// The optional gradient slot is used by [`ParamStore`](crate::params::ParamStore)
/// to hold accumulated parameter gradients between backward and the optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    length: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(channels: usize, length: usize) -> Self {
        Self {
            channels,
            length,
            data: vec![0.0; channels * length],
            grad: None,
        }
    }

    pub fn filled(channels: usize, length: usize, value: f64) -> Self {
        Self {
            channels,
            length,
            data: vec![value; channels * length],
            grad: None,
        }
    }

    pub fn from_vec(channels: usize, length: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * length {
            return Err(Error::invalid(format!(
                "tensor data has {} values, shape {}x{} needs {}",
                data.len(),
                channels,
                length,
                channels * length
            )));
        }
        Ok(Self {
            channels,
            length,
            data,
            grad: None,
        })
    }

    /// Builds a tensor from channel rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let channels = rows.len();
        let length = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != length) {
            return Err(Error::invalid("tensor rows have unequal lengths"));
        }
        Self::from_vec(channels, length, rows.concat())
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            channels: 1,
            length: 1,
            data: vec![value],
            grad: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.channels, self.length)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, channel: usize, t: usize) -> f64 {
        self.data[channel * self.length + t]
    }

    pub fn set(&mut self, channel: usize, t: usize, value: f64) {
        self.data[channel * self.length + t] = value;
    }

    pub fn row(&self, channel: usize) -> &[f64] {
        &self.data[channel * self.length..(channel + 1) * self.length]
    }

    pub fn row_mut(&mut self, channel: usize) -> &mut [f64] {
        &mut self.data[channel * self.length..(channel + 1) * self.length]
    }

    /// Column `t` gathered across channels.
    pub fn column(&self, t: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, t)).collect()
    }

    /// Scalar value of a 1×1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::invalid(format!(
                "gradient has {} values, tensor has {}",
                g.len(),
                self.data.len()
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn set_grad(&mut self, g: Vec<f64>) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::invalid("gradient shape does not match tensor"));
        }
        self.grad = Some(g);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self.grad.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(2, 3, vec![0.0; 5]).is_err());
        let t = Tensor::from_vec(2, 3, (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
        assert_eq!(t.column(2), vec![2.0, 5.0]);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(1, 2);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }
}
