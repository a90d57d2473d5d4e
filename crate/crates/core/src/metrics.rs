//! Latency and energy of in-sensor MAC cycles, and assembly of per-phase
//! traces into a timed waveform table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::array::{fc_cycles, resource_report, ArrayKind, ArrayTopology, BankTrace};
use crate::device::{phase_switches, Phase, TraceRecord};
use crate::error::{Error, Result};
use crate::netlab::NetworkSpec;

/// Duration of each MAC phase in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub t_clear: f64,
    pub t_charge: f64,
    pub t_transfer: f64,
    pub t_sum: f64,
}

impl Default for PhaseTiming {
    /// 350 ns split evenly over the four phases.
    fn default() -> Self {
        PhaseTiming {
            t_clear: 87.5,
            t_charge: 87.5,
            t_transfer: 87.5,
            t_sum: 87.5,
        }
    }
}

impl PhaseTiming {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in Phase::SEQUENCE.iter().zip(self.durations()) {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Domain(format!(
                    "{} phase duration must be positive, got {t}",
                    name.name()
                )));
            }
        }
        Ok(())
    }

    /// Durations in [`Phase::SEQUENCE`] order.
    pub fn durations(&self) -> [f64; 4] {
        [self.t_clear, self.t_charge, self.t_transfer, self.t_sum]
    }

    /// Length of one full MAC cycle.
    pub fn cycle(&self) -> f64 {
        self.durations().iter().sum()
    }

    /// Offset of `phase` from the start of its cycle.
    pub fn phase_start(&self, phase: Phase) -> f64 {
        self.durations()[..phase.index()].iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyMode {
    /// Fixed energy per array cycle.
    Calibrated,
    /// Sum of `|Q_n| |V_n|` over the Charge phase of a recorded trace.
    ChargeBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub mode: EnergyMode,
    /// nJ per full-array cycle in calibrated mode.
    pub e_per_classification: f64,
    /// Volts per unit of normalized weight in charge-based mode.
    pub supply_v: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel {
            mode: EnergyMode::Calibrated,
            e_per_classification: 0.9,
            supply_v: 1.0,
        }
    }
}

impl EnergyModel {
    pub fn charge_based() -> Self {
        EnergyModel {
            mode: EnergyMode::ChargeBased,
            ..EnergyModel::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e_per_classification >= 0.0 && self.e_per_classification.is_finite()) {
            return Err(Error::Domain(format!(
                "energy per classification must be non-negative, got {}",
                self.e_per_classification
            )));
        }
        if !(self.supply_v > 0.0 && self.supply_v.is_finite()) {
            return Err(Error::Domain(format!(
                "supply voltage must be positive, got {}",
                self.supply_v
            )));
        }
        Ok(())
    }
}

fn check_consistent(net: &NetworkSpec, topology: &ArrayTopology) -> Result<()> {
    if net.rows != topology.rows || net.cols != topology.cols {
        return Err(Error::shape(
            format!("{}x{} array", net.rows, net.cols),
            format!("{}x{} array", topology.rows, topology.cols),
        ));
    }
    Ok(())
}

/// Sequential array cycles per inference: `ceil(M / B)` for an FC layer,
/// one per horizontal window position for a convolution.
pub fn array_cycles(net: &NetworkSpec, topology: &ArrayTopology) -> Result<usize> {
    check_consistent(net, topology)?;
    Ok(match topology.kind {
        ArrayKind::FullyConnected => fc_cycles(topology, net.analog_outputs),
        ArrayKind::Convolution { kernel } => {
            resource_report(topology.rows, topology.cols, kernel)?.steps
        }
    })
}

/// Inference latency in ns. Independent of weights and inputs.
pub fn latency(net: &NetworkSpec, timing: &PhaseTiming, topology: &ArrayTopology) -> Result<f64> {
    timing.validate()?;
    Ok(timing.cycle() * array_cycles(net, topology)? as f64)
}

/// Energy in nJ for one inference spanning `cycles` array cycles.
///
/// Charge-based mode needs the trace: pC times V gives pJ.
pub fn energy(model: &EnergyModel, cycles: usize, trace: Option<&[TraceRecord]>) -> Result<f64> {
    model.validate()?;
    match model.mode {
        EnergyMode::Calibrated => Ok(model.e_per_classification * cycles as f64),
        EnergyMode::ChargeBased => {
            let trace = trace.ok_or_else(|| {
                Error::Usage("charge-based energy needs a recorded MAC trace".into())
            })?;
            let s = model.supply_v;
            let pj: f64 = trace
                .iter()
                .filter(|r| r.phase == Phase::Charge)
                .map(|r| (r.charge_pc * s).abs() * (r.voltage_v * s).abs())
                .sum();
            Ok(pj * 1e-3)
        }
    }
}

/// DAC and ADC counts of a topology. An FC array drives every subpixel of
/// every bank and reads one ADC per bank.
pub fn converter_counts(topology: &ArrayTopology) -> Result<(usize, usize)> {
    match topology.kind {
        ArrayKind::FullyConnected => Ok((
            topology.bank_count() * topology.pixel_count(),
            topology.bank_count(),
        )),
        ArrayKind::Convolution { kernel } => {
            let r = resource_report(topology.rows, topology.cols, kernel)?;
            Ok((r.dacs, r.adcs))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub latency_ns: f64,
    #[serde(rename = "energy_nJ")]
    pub energy_nj: f64,
    pub cycles: usize,
    pub dacs: usize,
    pub adcs: usize,
}

impl MetricsSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

/// Latency, energy and converter counts of one inference. `trace` is only
/// consulted in charge-based mode.
pub fn summarize(
    net: &NetworkSpec,
    topology: &ArrayTopology,
    timing: &PhaseTiming,
    model: &EnergyModel,
    trace: Option<&[TraceRecord]>,
) -> Result<MetricsSummary> {
    let cycles = array_cycles(net, topology)?;
    let (dacs, adcs) = converter_counts(topology)?;
    Ok(MetricsSummary {
        latency_ns: latency(net, timing, topology)?,
        energy_nj: energy(model, cycles, trace)?,
        cycles,
        dacs,
        adcs,
    })
}

/// One step of a piecewise-constant signal: `signal` holds `value` from
/// `time_ns` until its next row.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformRow {
    pub time_ns: f64,
    pub signal: String,
    pub value: f64,
}

pub const SWITCH_SIGNALS: [&str; 4] = ["CL", "MUL", "CON", "ADD"];

/// Switch levels and output voltages `U_1..U_M` over the cycles of an FC
/// inference. Each output reads 0 until the Sum phase of the cycle that
/// produces it and is held afterwards. A closing row at the end of the last
/// cycle carries the final output values.
pub fn assemble_waveform(traces: &[BankTrace], timing: &PhaseTiming) -> Result<Vec<WaveformRow>> {
    timing.validate()?;
    if traces.is_empty() || traces.iter().any(|t| t.records.is_empty()) {
        return Err(Error::Usage("waveform needs a non-empty MAC trace".into()));
    }
    let outputs = traces.iter().map(|t| t.output).max().unwrap_or(0) + 1;
    let cycles = traces.iter().map(|t| t.cycle).max().unwrap_or(0) + 1;
    let mut u_final = vec![0.0; outputs];
    for t in traces {
        let sum = t
            .records
            .iter()
            .find(|r| r.phase == Phase::Sum)
            .ok_or_else(|| {
                Error::Usage(format!("trace of output {} has no Sum phase", t.output))
            })?;
        u_final[t.output] = sum.voltage_v;
    }
    let done_by = |m: usize| traces.iter().find(|t| t.output == m).map(|t| t.cycle);

    let mut rows = Vec::with_capacity((cycles * 4 + 1) * (4 + outputs));
    let mut push = |time_ns: f64, signal: String, value: f64| {
        rows.push(WaveformRow {
            time_ns,
            signal,
            value,
        })
    };
    for cycle in 0..cycles {
        for phase in Phase::SEQUENCE {
            let t = cycle as f64 * timing.cycle() + timing.phase_start(phase);
            for (name, on) in SWITCH_SIGNALS.iter().zip(phase_switches(phase).as_array()) {
                push(t, name.to_string(), f64::from(u8::from(on)));
            }
            for (m, &u) in u_final.iter().enumerate() {
                let ready = match done_by(m) {
                    Some(c) => c < cycle || (c == cycle && phase == Phase::Sum),
                    None => false,
                };
                push(t, format!("U_{}", m + 1), if ready { u } else { 0.0 });
            }
        }
    }
    let end = cycles as f64 * timing.cycle();
    for name in SWITCH_SIGNALS {
        push(end, name.to_string(), 0.0);
    }
    for (m, &u) in u_final.iter().enumerate() {
        push(end, format!("U_{}", m + 1), u);
    }
    Ok(rows)
}

pub fn waveform_csv(rows: &[WaveformRow]) -> String {
    let mut out = String::from("time_ns,signal,value\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.time_ns, r.signal, r.value);
    }
    out
}

/// Last value of every `U_m` signal, in output order.
pub fn final_outputs(rows: &[WaveformRow]) -> Vec<f64> {
    let mut last: Vec<(usize, f64)> = Vec::new();
    for r in rows {
        if let Some(m) = r
            .signal
            .strip_prefix("U_")
            .and_then(|s| s.parse::<usize>().ok())
        {
            match last.iter_mut().find(|(k, _)| *k == m) {
                Some(slot) => slot.1 = r.value,
                None => last.push((m, r.value)),
            }
        }
    }
    last.sort_by_key(|&(m, _)| m);
    last.into_iter().map(|(_, v)| v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{build_conv_array, build_fc_array, fc_forward, fc_forward_traced};
    use crate::dataset::{encode_capacitive, letter_pattern, Glyph};
    use crate::device::{mac_evaluate_traced, SensorParams};
    use crate::netlab::{Architecture, WeightBank};
    use ndarray::Array2;

    fn fc_spec(banks: usize) -> (NetworkSpec, ArrayTopology) {
        let mut net = NetworkSpec::for_architecture(Architecture::FcClassifier);
        net.banks = banks;
        (net, build_fc_array(3, 3, banks).unwrap())
    }

    #[test]
    fn fc_latency_is_one_cycle() {
        let (net, topo) = fc_spec(4);
        assert_eq!(
            latency(&net, &PhaseTiming::default(), &topo).unwrap(),
            350.0
        );
    }

    #[test]
    fn conv_latency_counts_steps() {
        let net = NetworkSpec::for_architecture(Architecture::CnnClassifier);
        let topo = build_conv_array(5, 5, 3).unwrap();
        assert_eq!(
            latency(&net, &PhaseTiming::default(), &topo).unwrap(),
            1050.0
        );
    }

    #[test]
    fn single_bank_serializes_outputs() {
        let (net4, t4) = fc_spec(4);
        let (net1, t1) = fc_spec(1);
        let timing = PhaseTiming::default();
        let l4 = latency(&net4, &timing, &t4).unwrap();
        assert_eq!(latency(&net1, &timing, &t1).unwrap(), 4.0 * l4);
    }

    #[test]
    fn calibrated_energy_per_classification() {
        let (net, topo) = fc_spec(4);
        let cycles = array_cycles(&net, &topo).unwrap();
        assert_eq!(energy(&EnergyModel::default(), cycles, None).unwrap(), 0.9);
    }

    #[test]
    fn charge_energy_needs_trace() {
        let err = energy(&EnergyModel::charge_based(), 1, None).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn charge_energy_zero_weights() {
        let (_, trace) = mac_evaluate_traced(&[62.9; 9], &[0.0; 9], 72.0).unwrap();
        assert_eq!(
            energy(&EnergyModel::charge_based(), 1, Some(&trace)).unwrap(),
            0.0
        );
    }

    #[test]
    fn charge_energy_all_ones_at_c_high() {
        let c_h = SensorParams::default().c_high();
        let (_, trace) = mac_evaluate_traced(&[c_h; 9], &[1.0; 9], 72.0).unwrap();
        let e = energy(&EnergyModel::charge_based(), 1, Some(&trace)).unwrap();
        assert!((e - 9.0 * c_h * 1e-3).abs() < 1e-12);
        assert!((e - 0.566).abs() < 1e-3);
    }

    fn invz_waveform(weights: &WeightBank) -> (Vec<f64>, Vec<WaveformRow>) {
        let params = SensorParams::default();
        let topo = build_fc_array(3, 3, 4).unwrap();
        let img = encode_capacitive(&letter_pattern(Glyph::InvZ, 3).unwrap(), &params).c_i;
        let u = fc_forward(&topo, &img, weights, &params).unwrap();
        let traces = fc_forward_traced(&topo, &img, weights, &params).unwrap();
        (
            u,
            assemble_waveform(&traces, &PhaseTiming::default()).unwrap(),
        )
    }

    #[test]
    fn waveform_final_values_match_forward() {
        let v = Array2::from_shape_fn((4, 9), |(m, n)| ((m * 9 + n) as f64 * 0.37).sin());
        let (u, rows) = invz_waveform(&WeightBank::new(v));
        assert_eq!(final_outputs(&rows), u);
    }

    #[test]
    fn zero_weight_waveform_is_flat() {
        let (_, rows) = invz_waveform(&WeightBank::new(Array2::zeros((4, 9))));
        assert!(rows
            .iter()
            .filter(|r| r.signal.starts_with("U_"))
            .all(|r| r.value == 0.0));
    }

    #[test]
    fn waveform_is_time_ordered() {
        let v = Array2::from_elem((4, 9), 0.5);
        let (_, rows) = invz_waveform(&WeightBank::new(v));
        assert!(rows.windows(2).all(|w| w[0].time_ns <= w[1].time_ns));
        assert_eq!(rows.last().unwrap().time_ns, 350.0);
    }

    #[test]
    fn empty_trace_is_usage_error() {
        assert!(matches!(
            assemble_waveform(&[], &PhaseTiming::default()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn summary_json_fields() {
        let (net, topo) = fc_spec(4);
        let s = summarize(
            &net,
            &topo,
            &PhaseTiming::default(),
            &EnergyModel::default(),
            None,
        )
        .unwrap();
        let json = s.to_json();
        for key in ["latency_ns", "energy_nJ", "cycles", "dacs", "adcs"] {
            assert!(json.contains(key), "{key} missing from {json}");
        }
        assert_eq!((s.dacs, s.adcs), (36, 4));
    }
}
