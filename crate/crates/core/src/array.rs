//! Sensor arrays built from MAC pixels: subpixel bank wiring for parallel FC
//! readout and the sliding-window schedule for in-sensor convolution.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::device::{
    mac_evaluate, mac_evaluate_traced, series_capacitance, SensorParams, TraceRecord,
};
use crate::error::{Error, Result};
use crate::netlab::WeightBank;

/// One subpixel feeding a bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tap {
    pub row: usize,
    pub col: usize,
    pub subpixel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayKind {
    FullyConnected,
    Convolution { kernel: usize },
}

/// Pixel grid plus the subpixel wiring of each readout bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayTopology {
    pub rows: usize,
    pub cols: usize,
    pub subpixels_per_pixel: usize,
    pub kind: ArrayKind,
    /// `banks[b]` lists the subpixels summed on bank `b`'s output node.
    pub banks: Vec<Vec<Tap>>,
}

impl ArrayTopology {
    pub fn pixel_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn bank_count(&self) -> usize {
        self.banks.len()
    }

    fn check_image(&self, image: &Array2<f64>) -> Result<()> {
        if image.dim() != (self.rows, self.cols) {
            return Err(Error::shape(
                format!("{}x{} image", self.rows, self.cols),
                format!("{}x{} image", image.nrows(), image.ncols()),
            ));
        }
        Ok(())
    }
}

/// Bank `m` collects subpixel `m` of every pixel, row-major, so all banks
/// evaluate in the same array cycle.
pub fn build_fc_array(rows: usize, cols: usize, banks: usize) -> Result<ArrayTopology> {
    if rows == 0 || cols == 0 || banks == 0 {
        return Err(Error::Domain(format!(
            "FC array needs non-zero dimensions (rows={rows}, cols={cols}, banks={banks})"
        )));
    }
    let wiring = (0..banks)
        .map(|m| {
            (0..rows)
                .flat_map(|row| {
                    (0..cols).map(move |col| Tap {
                        row,
                        col,
                        subpixel: m,
                    })
                })
                .collect()
        })
        .collect();
    Ok(ArrayTopology {
        rows,
        cols,
        subpixels_per_pixel: banks,
        kind: ArrayKind::FullyConnected,
        banks: wiring,
    })
}

/// Array for `kernel`x`kernel` convolution. Each pixel has `kernel^2`
/// subpixels; a window uses the subpixel matching the pixel's offset inside
/// it, so overlapping windows never share a subpixel. Banks are indexed like
/// [`ConvSchedule::windows`].
pub fn build_conv_array(rows: usize, cols: usize, kernel: usize) -> Result<ArrayTopology> {
    let schedule = schedule_conv(rows, cols, kernel)?;
    let banks = schedule
        .windows()
        .map(|w| {
            (0..kernel)
                .flat_map(|i| {
                    (0..kernel).map(move |j| Tap {
                        row: w.origin_row + i,
                        col: w.origin_col + j,
                        subpixel: i * kernel + j,
                    })
                })
                .collect()
        })
        .collect();
    Ok(ArrayTopology {
        rows,
        cols,
        subpixels_per_pixel: kernel * kernel,
        kind: ArrayKind::Convolution { kernel },
        banks,
    })
}

/// Series capacitance of every pixel of an induced-capacitance image.
pub fn series_image(c_i_image: &Array2<f64>, c0: f64) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(c_i_image.dim());
    for (dst, &c) in out.iter_mut().zip(c_i_image.iter()) {
        *dst = series_capacitance(c, c0)?;
    }
    Ok(out)
}

/// Number of sequential array cycles needed to produce `outputs` FC outputs.
pub fn fc_cycles(topology: &ArrayTopology, outputs: usize) -> usize {
    outputs.div_ceil(topology.bank_count().max(1))
}

/// FC layer evaluated in the array: `U_m` is the MAC over bank `m mod B`
/// programmed with row `m` of the weight bank.
pub fn fc_forward(
    topology: &ArrayTopology,
    c_i_image: &Array2<f64>,
    weights: &WeightBank,
    params: &SensorParams,
) -> Result<Vec<f64>> {
    topology.check_image(c_i_image)?;
    let series = series_image(c_i_image, params.c0)?;
    fc_forward_series(topology, &series, weights, params.c0)
}

/// [`fc_forward`] on an image that is already in series capacitance.
pub fn fc_forward_series(
    topology: &ArrayTopology,
    series: &Array2<f64>,
    weights: &WeightBank,
    c0: f64,
) -> Result<Vec<f64>> {
    topology.check_image(series)?;
    if topology.kind != ArrayKind::FullyConnected {
        return Err(Error::Usage(
            "fc_forward needs a fully connected array".into(),
        ));
    }
    let v = &weights.v;
    if v.ncols() != topology.pixel_count() {
        return Err(Error::shape(
            format!("weights with {} columns", topology.pixel_count()),
            format!("{} columns", v.ncols()),
        ));
    }
    let b = topology.bank_count();
    let mut c_buf = Vec::with_capacity(topology.pixel_count());
    let mut v_buf = Vec::with_capacity(topology.pixel_count());
    (0..v.nrows())
        .map(|m| {
            c_buf.clear();
            v_buf.clear();
            for tap in &topology.banks[m % b] {
                c_buf.push(series[(tap.row, tap.col)]);
                v_buf.push(v[(m, tap.row * topology.cols + tap.col)]);
            }
            mac_evaluate(&c_buf, &v_buf, c0)
        })
        .collect()
}

/// Phase trace of the MAC cycle producing one FC output.
#[derive(Debug, Clone, PartialEq)]
pub struct BankTrace {
    pub output: usize,
    pub bank: usize,
    /// Sequential array cycle in which the bank produced this output.
    pub cycle: usize,
    pub u: f64,
    pub records: Vec<TraceRecord>,
}

/// [`fc_forward`] with a phase trace for every output. The `u` values are
/// bitwise identical to the untraced forward pass.
pub fn fc_forward_traced(
    topology: &ArrayTopology,
    c_i_image: &Array2<f64>,
    weights: &WeightBank,
    params: &SensorParams,
) -> Result<Vec<BankTrace>> {
    topology.check_image(c_i_image)?;
    if topology.kind != ArrayKind::FullyConnected {
        return Err(Error::Usage(
            "fc_forward needs a fully connected array".into(),
        ));
    }
    let series = series_image(c_i_image, params.c0)?;
    let v = &weights.v;
    if v.ncols() != topology.pixel_count() {
        return Err(Error::shape(
            format!("weights with {} columns", topology.pixel_count()),
            format!("{} columns", v.ncols()),
        ));
    }
    let b = topology.bank_count();
    (0..v.nrows())
        .map(|m| {
            let bank = m % b;
            let (c_buf, v_buf): (Vec<f64>, Vec<f64>) = topology.banks[bank]
                .iter()
                .map(|tap| {
                    (
                        series[(tap.row, tap.col)],
                        v[(m, tap.row * topology.cols + tap.col)],
                    )
                })
                .unzip();
            let (u, records) = mac_evaluate_traced(&c_buf, &v_buf, params.c0)?;
            Ok(BankTrace {
                output: m,
                bank,
                cycle: m / b,
                u,
                records,
            })
        })
        .collect()
}

/// A window evaluated in one schedule step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSlot {
    pub origin_row: usize,
    pub origin_col: usize,
    pub adc: usize,
}

/// Sweep order of convolution windows: one step per horizontal position,
/// with all vertical positions evaluated in parallel on separate ADCs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSchedule {
    pub rows: usize,
    pub cols: usize,
    pub kernel: usize,
    pub steps: Vec<Vec<WindowSlot>>,
}

impl ConvSchedule {
    pub fn out_rows(&self) -> usize {
        self.rows - self.kernel + 1
    }

    pub fn out_cols(&self) -> usize {
        self.cols - self.kernel + 1
    }

    /// All windows, step by step.
    pub fn windows(&self) -> impl Iterator<Item = &WindowSlot> {
        self.steps.iter().flatten()
    }

    pub fn window_count(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            detail: e.to_string(),
        })
    }
}

fn check_conv_dims(rows: usize, cols: usize, kernel: usize) -> Result<()> {
    if kernel == 0 || rows < kernel || cols < kernel {
        return Err(Error::Domain(format!(
            "{rows}x{cols} array cannot hold a {kernel}x{kernel} kernel"
        )));
    }
    Ok(())
}

pub fn schedule_conv(rows: usize, cols: usize, kernel: usize) -> Result<ConvSchedule> {
    check_conv_dims(rows, cols, kernel)?;
    let steps = (0..=cols - kernel)
        .map(|origin_col| {
            (0..=rows - kernel)
                .map(|origin_row| WindowSlot {
                    origin_row,
                    origin_col,
                    adc: origin_row,
                })
                .collect()
        })
        .collect();
    Ok(ConvSchedule {
        rows,
        cols,
        kernel,
        steps,
    })
}

/// Stride-1, unpadded cross-correlation of the image with a shared kernel,
/// one MAC per scheduled window.
pub fn conv_forward(
    topology: &ArrayTopology,
    schedule: &ConvSchedule,
    c_i_image: &Array2<f64>,
    kernel_weights: &[f64],
    params: &SensorParams,
) -> Result<Array2<f64>> {
    topology.check_image(c_i_image)?;
    let series = series_image(c_i_image, params.c0)?;
    conv_forward_series(topology, schedule, &series, kernel_weights, params.c0)
}

/// [`conv_forward`] on an image that is already in series capacitance.
pub fn conv_forward_series(
    topology: &ArrayTopology,
    schedule: &ConvSchedule,
    series: &Array2<f64>,
    kernel_weights: &[f64],
    c0: f64,
) -> Result<Array2<f64>> {
    let k = check_conv(topology, schedule, series, kernel_weights)?;
    let out_cols = schedule.out_cols();
    let mut out = Array2::zeros((schedule.out_rows(), out_cols));
    let mut c_buf = Vec::with_capacity(k * k);
    let mut v_buf = Vec::with_capacity(k * k);
    for slot in schedule.windows() {
        let bank = &topology.banks[slot.origin_row * out_cols + slot.origin_col];
        c_buf.clear();
        v_buf.clear();
        for tap in bank {
            c_buf.push(series[(tap.row, tap.col)]);
            v_buf.push(kernel_weights[tap.subpixel]);
        }
        out[(slot.origin_row, slot.origin_col)] = mac_evaluate(&c_buf, &v_buf, c0)?;
    }
    Ok(out)
}

fn check_conv(
    topology: &ArrayTopology,
    schedule: &ConvSchedule,
    series: &Array2<f64>,
    kernel_weights: &[f64],
) -> Result<usize> {
    topology.check_image(series)?;
    let k = match topology.kind {
        ArrayKind::Convolution { kernel } => kernel,
        ArrayKind::FullyConnected => {
            return Err(Error::Usage(
                "conv_forward needs a convolution array".into(),
            ))
        }
    };
    if (schedule.rows, schedule.cols, schedule.kernel) != (topology.rows, topology.cols, k) {
        return Err(Error::shape(
            format!("schedule for {}x{} / k={}", topology.rows, topology.cols, k),
            format!(
                "{}x{} / k={}",
                schedule.rows, schedule.cols, schedule.kernel
            ),
        ));
    }
    if kernel_weights.len() != k * k {
        return Err(Error::shape(
            format!("{} kernel weights", k * k),
            kernel_weights.len(),
        ));
    }
    Ok(k)
}

/// [`conv_forward`] with a phase trace per window. Output `i` of the
/// returned traces is window `origin_row * out_cols + origin_col`, and its
/// cycle is the schedule step.
pub fn conv_forward_traced(
    topology: &ArrayTopology,
    schedule: &ConvSchedule,
    c_i_image: &Array2<f64>,
    kernel_weights: &[f64],
    params: &SensorParams,
) -> Result<Vec<BankTrace>> {
    topology.check_image(c_i_image)?;
    let series = series_image(c_i_image, params.c0)?;
    check_conv(topology, schedule, &series, kernel_weights)?;
    let out_cols = schedule.out_cols();
    let mut traces = Vec::with_capacity(schedule.window_count());
    for (step, slots) in schedule.steps.iter().enumerate() {
        for slot in slots {
            let index = slot.origin_row * out_cols + slot.origin_col;
            let (c_buf, v_buf): (Vec<f64>, Vec<f64>) = topology.banks[index]
                .iter()
                .map(|tap| (series[(tap.row, tap.col)], kernel_weights[tap.subpixel]))
                .unzip();
            let (u, records) = mac_evaluate_traced(&c_buf, &v_buf, params.c0)?;
            traces.push(BankTrace {
                output: index,
                bank: index,
                cycle: step,
                u,
                records,
            });
        }
    }
    traces.sort_by_key(|t| t.output);
    Ok(traces)
}

/// DAC, ADC and step counts of a convolution array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub dacs: usize,
    pub adcs: usize,
    pub steps: usize,
}

/// One DAC per kernel weight, one ADC per array row, one step per
/// horizontal window position.
pub fn resource_report(rows: usize, cols: usize, kernel: usize) -> Result<ResourceReport> {
    check_conv_dims(rows, cols, kernel)?;
    Ok(ResourceReport {
        dacs: kernel * kernel,
        adcs: rows,
        steps: cols - kernel + 1,
    })
}
