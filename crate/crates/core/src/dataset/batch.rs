//! Stacking records into network inputs and targets.

use super::measurements::MeasurementRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side of the square grid a measurement of length `2M` folds into.
pub fn measurement_side(y_len: usize) -> Result<usize> {
    let m = y_len / 2;
    let side = (m as f64).sqrt().round() as usize;
    if !y_len.is_multiple_of(2) || side * side != m || m == 0 {
        return Err(Error::invalid(format!(
            "measurement length {y_len} is not two square channels"
        )));
    }
    Ok(side)
}

/// Measurements as a `[n, 2, side, side]` tensor.
pub fn stack_measurements(records: &[&MeasurementRecord], side: usize) -> Result<Tensor> {
    let m = side * side;
    let mut data = Vec::with_capacity(records.len() * 2 * m);
    for r in records {
        if r.y.len() != 2 * m {
            return Err(Error::shape("measurement", &[2 * m], &[r.y.len()]));
        }
        data.extend_from_slice(&r.y);
    }
    Tensor::new(&[records.len(), 2, side, side], data)
}

/// Ground-truth images as a `[n, pixels]` tensor.
pub fn stack_images(records: &[&MeasurementRecord], pixels: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(records.len() * pixels);
    for r in records {
        let img = r
            .image
            .as_ref()
            .ok_or_else(|| Error::invalid("record has no embedded image"))?;
        if img.len() != pixels {
            return Err(Error::shape("image", &[pixels], &[img.len()]));
        }
        data.extend_from_slice(img);
    }
    Tensor::new(&[records.len(), pixels], data)
}

/// Index batches of at most `size`, in the given order.
pub fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size.max(1))
}
