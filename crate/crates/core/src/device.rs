//! Single capacitive pixel: the series sensing capacitance and the
//! four-phase charge-domain multiply-and-accumulate cycle.
//!
//! Units throughout are pF, V, and pC (pF x V).

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to a noisy induced capacitance.
pub const NOISE_FLOOR_PF: f64 = 0.01;

/// How the Gaussian noise standard deviation is referenced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// sigma = noise_frac x the pixel's own class value (C_IH or C_IL).
    #[default]
    PerClass,
    /// sigma = noise_frac x C_IH for every pixel.
    Global,
}

/// Fixed electrical parameters of a sensor array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorParams {
    /// Sensing capacitor C0 (pF).
    pub c0: f64,
    /// Induced capacitance for a pixel inside the glyph (pF).
    pub c_ih: f64,
    /// Induced capacitance for a pixel outside the glyph (pF).
    pub c_il: f64,
    /// RMS noise as a fraction of the nominal capacitance.
    pub noise_frac: f64,
    pub noise_mode: NoiseMode,
}

impl Default for SensorParams {
    fn default() -> Self {
        SensorParams {
            c0: 72.0,
            c_ih: 500.0,
            c_il: 16.77,
            noise_frac: 0.2,
            noise_mode: NoiseMode::PerClass,
        }
    }
}

impl SensorParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.c0, self.c_ih, self.c_il, self.noise_frac]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Domain("sensor parameters must be finite".into()));
        }
        if self.c0 <= 0.0 || self.c_ih <= 0.0 || self.c_il <= 0.0 {
            return Err(Error::Domain(format!(
                "capacitances must be positive (c0={}, c_ih={}, c_il={})",
                self.c0, self.c_ih, self.c_il
            )));
        }
        if self.c_ih <= self.c_il {
            return Err(Error::Domain(format!(
                "c_ih ({}) must exceed c_il ({})",
                self.c_ih, self.c_il
            )));
        }
        if self.noise_frac < 0.0 {
            return Err(Error::Domain(format!(
                "noise_frac must be non-negative, got {}",
                self.noise_frac
            )));
        }
        Ok(())
    }

    /// Series capacitance of an inside pixel, C_H.
    pub fn c_high(&self) -> f64 {
        series_value(self.c_ih, self.c0)
    }

    /// Series capacitance of an outside pixel, C_L.
    pub fn c_low(&self) -> f64 {
        series_value(self.c_il, self.c0)
    }

    /// Standard deviation of the noise applied to a pixel whose clean value is `nominal`.
    pub fn noise_sigma(&self, nominal: f64) -> f64 {
        match self.noise_mode {
            NoiseMode::PerClass => self.noise_frac * nominal,
            NoiseMode::Global => self.noise_frac * self.c_ih,
        }
    }
}

/// Induced capacitance of one pixel and its series combination with C0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCap {
    pub c_i: f64,
    pub c_series: f64,
}

impl PixelCap {
    pub fn new(c_i: f64, c0: f64) -> Result<Self> {
        Ok(PixelCap {
            c_i,
            c_series: series_capacitance(c_i, c0)?,
        })
    }
}

#[inline]
pub(crate) fn series_value(c_i: f64, c0: f64) -> f64 {
    c_i * c0 / (c_i + c0)
}

/// Series combination `c_i * c0 / (c_i + c0)` of the induced and sensing capacitors.
pub fn series_capacitance(c_i: f64, c0: f64) -> Result<f64> {
    if !(c_i > 0.0 && c0 > 0.0) || !c_i.is_finite() || !c0.is_finite() {
        return Err(Error::Domain(format!(
            "series capacitance needs positive finite inputs (c_i={c_i}, c0={c0})"
        )));
    }
    Ok(series_value(c_i, c0))
}

/// Inverse of [`series_capacitance`]: recovers the induced capacitance from
/// a series value. Requires `0 < c_series < c0`.
pub fn induced_from_series(c_series: f64, c0: f64) -> Result<f64> {
    if !(c_series > 0.0 && c_series < c0) {
        return Err(Error::Domain(format!(
            "series capacitance {c_series} outside (0, {c0})"
        )));
    }
    Ok(c_series * c0 / (c0 - c_series))
}

/// The four phases of one MAC cycle, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Clear,
    Charge,
    Transfer,
    Sum,
}

impl Phase {
    pub const SEQUENCE: [Phase; 4] = [Phase::Clear, Phase::Charge, Phase::Transfer, Phase::Sum];

    pub fn index(self) -> usize {
        match self {
            Phase::Clear => 0,
            Phase::Charge => 1,
            Phase::Transfer => 2,
            Phase::Sum => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Clear => "clear",
            Phase::Charge => "charge",
            Phase::Transfer => "transfer",
            Phase::Sum => "sum",
        }
    }
}

/// Transmission-gate control levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Switches {
    pub cl: bool,
    pub mul: bool,
    pub con: bool,
    pub add: bool,
}

impl Switches {
    /// Levels ordered (CL, MUL, CON, ADD).
    pub fn as_array(self) -> [bool; 4] {
        [self.cl, self.mul, self.con, self.add]
    }
}

/// Switch pattern asserted during `phase`.
pub fn phase_switches(phase: Phase) -> Switches {
    match phase {
        Phase::Clear => Switches {
            cl: true,
            mul: false,
            con: true,
            add: true,
        },
        Phase::Charge => Switches {
            cl: false,
            mul: true,
            con: false,
            add: false,
        },
        Phase::Transfer => Switches {
            cl: false,
            mul: false,
            con: true,
            add: false,
        },
        Phase::Sum => Switches {
            cl: false,
            mul: false,
            con: true,
            add: true,
        },
    }
}

/// Charge state of one MAC unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacUnitState {
    pub phase: Phase,
    pub switches: Switches,
    /// Q_n on the lower plate (pC).
    pub stored_charge: f64,
    /// Lower plate voltage (V).
    pub plate_voltage: f64,
}

impl Default for MacUnitState {
    fn default() -> Self {
        MacUnitState::cleared()
    }
}

impl MacUnitState {
    pub fn cleared() -> Self {
        MacUnitState {
            phase: Phase::Clear,
            switches: phase_switches(Phase::Clear),
            stored_charge: 0.0,
            plate_voltage: 0.0,
        }
    }

    pub fn clear(&mut self) {
        *self = MacUnitState::cleared();
    }

    /// MUL closed: the series capacitance charges to the weight voltage.
    pub fn charge(&mut self, c_series: f64, v: f64) {
        self.phase = Phase::Charge;
        self.switches = phase_switches(Phase::Charge);
        self.stored_charge = c_series * v;
        self.plate_voltage = v;
    }

    /// CON closed: charge is held while the capacitance becomes C0.
    pub fn transfer(&mut self, c0: f64) {
        self.phase = Phase::Transfer;
        self.switches = phase_switches(Phase::Transfer);
        self.plate_voltage = self.stored_charge / c0;
    }

    /// CON and ADD closed: the plate joins the shared summation node.
    pub fn sum(&mut self, node_voltage: f64) {
        self.phase = Phase::Sum;
        self.switches = phase_switches(Phase::Sum);
        self.plate_voltage = node_voltage;
    }
}

/// One unit's state at the end of one phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub unit_index: usize,
    pub phase: Phase,
    pub switches: Switches,
    pub charge_pc: f64,
    pub voltage_v: f64,
}

impl TraceRecord {
    fn capture(unit_index: usize, state: &MacUnitState) -> Self {
        TraceRecord {
            unit_index,
            phase: state.phase,
            switches: state.switches,
            charge_pc: state.stored_charge,
            voltage_v: state.plate_voltage,
        }
    }
}

fn check_mac_inputs(c_series: &[f64], v: &[f64], c0: f64) -> Result<()> {
    if c_series.is_empty() {
        return Err(Error::shape("at least one unit", "0 units"));
    }
    if c_series.len() != v.len() {
        return Err(Error::shape(
            format!("{} weights", c_series.len()),
            format!("{} weights", v.len()),
        ));
    }
    if c0.is_nan() || c0 <= 0.0 {
        return Err(Error::Domain(format!("c0 must be positive, got {c0}")));
    }
    if let Some((index, &value)) = v
        .iter()
        .enumerate()
        .find(|(_, x)| x.is_nan() || x.abs() > 1.0)
    {
        return Err(Error::Range { index, value });
    }
    Ok(())
}

fn run_cycle(
    c_series: &[f64],
    v: &[f64],
    c0: f64,
    mut trace: Option<&mut Vec<TraceRecord>>,
) -> f64 {
    let n = c_series.len();
    let mut units = vec![MacUnitState::cleared(); n];
    if let Some(t) = trace.as_deref_mut() {
        t.extend(
            units
                .iter()
                .enumerate()
                .map(|(i, u)| TraceRecord::capture(i, u)),
        );
    }
    for (unit, (&c, &w)) in units.iter_mut().zip(c_series.iter().zip(v)) {
        unit.charge(c, w);
    }
    if let Some(t) = trace.as_deref_mut() {
        t.extend(
            units
                .iter()
                .enumerate()
                .map(|(i, u)| TraceRecord::capture(i, u)),
        );
    }
    for unit in units.iter_mut() {
        unit.transfer(c0);
    }
    if let Some(t) = trace.as_deref_mut() {
        t.extend(
            units
                .iter()
                .enumerate()
                .map(|(i, u)| TraceRecord::capture(i, u)),
        );
    }
    // Charge sharing across N plates of C0 each.
    let total: f64 = units.iter().map(|u| u.stored_charge).sum();
    let u_out = total / (n as f64 * c0);
    for unit in units.iter_mut() {
        unit.sum(u_out);
    }
    if let Some(t) = trace {
        t.extend(
            units
                .iter()
                .enumerate()
                .map(|(i, u)| TraceRecord::capture(i, u)),
        );
    }
    u_out
}

/// Output voltage `sum(c_n * v_n) / (N * c0)` of one MAC cycle over `N` units.
pub fn mac_evaluate(c_series: &[f64], v: &[f64], c0: f64) -> Result<f64> {
    check_mac_inputs(c_series, v, c0)?;
    Ok(run_cycle(c_series, v, c0, None))
}

/// Like [`mac_evaluate`], also returning every unit's state after each phase.
/// Records are grouped by phase, then ordered by unit index.
pub fn mac_evaluate_traced(
    c_series: &[f64],
    v: &[f64],
    c0: f64,
) -> Result<(f64, Vec<TraceRecord>)> {
    check_mac_inputs(c_series, v, c0)?;
    let mut trace = Vec::with_capacity(4 * c_series.len());
    let u = run_cycle(c_series, v, c0, Some(&mut trace));
    Ok((u, trace))
}

/// Adds Gaussian noise with standard deviation `noise_frac * nominal` to a
/// clean induced capacitance. Results below [`NOISE_FLOOR_PF`] are clamped.
pub fn apply_noise<R: Rng + ?Sized>(
    c_i_clean: f64,
    nominal: f64,
    noise_frac: f64,
    rng: &mut R,
) -> Result<f64> {
    if noise_frac.is_nan() || noise_frac < 0.0 || !nominal.is_finite() {
        return Err(Error::Domain(format!(
            "noise needs noise_frac >= 0 and finite nominal (got {noise_frac}, {nominal})"
        )));
    }
    if noise_frac == 0.0 {
        return Ok(c_i_clean);
    }
    let sigma = (noise_frac * nominal).abs();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok((c_i_clean + normal.sample(rng)).max(NOISE_FLOOR_PF))
}

/// Renders trace records as CSV. `phase_durations_ns` gives the length of
/// each phase in [`Phase::SEQUENCE`] order; `time_ns` is the phase start.
pub fn trace_csv(records: &[TraceRecord], phase_durations_ns: [f64; 4]) -> String {
    let mut starts = [0.0; 4];
    for i in 1..4 {
        starts[i] = starts[i - 1] + phase_durations_ns[i - 1];
    }
    let mut out = String::from("unit_index,phase,CL,MUL,CON,ADD,charge_pC,voltage_V,time_ns\n");
    for r in records {
        let [cl, mul, con, add] = r.switches.as_array().map(u8::from);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.unit_index,
            r.phase.name(),
            cl,
            mul,
            con,
            add,
            r.charge_pc,
            r.voltage_v,
            starts[r.phase.index()]
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn series_matches_hand_arithmetic() {
        // 500 * 72 / 572 = 36000 / 572 = 62.93706...
        let c = series_capacitance(500.0, 72.0).unwrap();
        assert!((c - 62.937).abs() < 5e-4, "{c}");
        // 16.77 * 72 / 88.77 = 1207.44 / 88.77 = 13.6019...
        let c = series_capacitance(16.77, 72.0).unwrap();
        assert!((c - 13.602).abs() < 5e-4, "{c}");
        assert_eq!(series_capacitance(72.0, 72.0).unwrap(), 36.0);
    }

    #[test]
    fn series_rejects_non_positive() {
        assert!(matches!(
            series_capacitance(0.0, 72.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            series_capacitance(5.0, -1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn switch_patterns() {
        let bits = |p| phase_switches(p).as_array();
        assert_eq!(bits(Phase::Clear), [true, false, true, true]);
        assert_eq!(bits(Phase::Charge), [false, true, false, false]);
        assert_eq!(bits(Phase::Transfer), [false, false, true, false]);
        assert_eq!(bits(Phase::Sum), [false, false, true, true]);
    }

    #[test]
    fn mac_examples() {
        let c0 = 72.0;
        assert_eq!(mac_evaluate(&[c0; 9], &[1.0; 9], c0).unwrap(), 1.0);
        assert_eq!(
            mac_evaluate(&[3.0, 40.0, 12.0], &[0.0; 3], c0).unwrap(),
            0.0
        );
        // 9 * 62.937 * 0.5 / (9 * 72) = 31.4685 / 72 = 0.43706
        let u = mac_evaluate(&[62.937; 9], &[0.5; 9], c0).unwrap();
        assert!((u - 0.4371).abs() < 5e-5, "{u}");
    }

    #[test]
    fn mac_errors() {
        assert!(matches!(
            mac_evaluate(&[1.0, 2.0], &[0.1], 72.0),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            mac_evaluate(&[1.0, 2.0], &[0.1, -1.5], 72.0),
            Err(Error::Range { index: 1, .. })
        ));
        assert!(mac_evaluate(&[], &[], 72.0).is_err());
    }

    #[test]
    fn trace_follows_phase_sequence() {
        let c = [62.9, 13.6, 40.0];
        let v = [0.5, -1.0, 0.25];
        let c0 = 72.0;
        let (u, trace) = mac_evaluate_traced(&c, &v, c0).unwrap();
        assert_eq!(trace.len(), 12);
        for (i, r) in trace.iter().enumerate() {
            assert_eq!(r.phase, Phase::SEQUENCE[i / 3]);
            assert_eq!(r.switches, phase_switches(r.phase));
            let n = r.unit_index;
            match r.phase {
                Phase::Clear => assert_eq!(r.charge_pc, 0.0),
                Phase::Charge => assert_eq!(r.charge_pc, c[n] * v[n]),
                Phase::Transfer => assert_eq!(r.voltage_v, c[n] * v[n] / c0),
                Phase::Sum => assert_eq!(r.voltage_v, u),
            }
        }
        assert_eq!(u, mac_evaluate(&c, &v, c0).unwrap());
    }

    #[test]
    fn cleared_unit_holds_no_charge() {
        let mut s = MacUnitState::cleared();
        s.charge(10.0, 0.7);
        s.clear();
        assert_eq!(s.stored_charge, 0.0);
        assert_eq!(s.switches, phase_switches(Phase::Clear));
    }

    #[test]
    fn noise_zero_is_identity_and_seeded_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(apply_noise(500.0, 500.0, 0.0, &mut rng).unwrap(), 500.0);
        let a = apply_noise(500.0, 500.0, 0.2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = apply_noise(500.0, 500.0, 0.2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn noise_std_matches_configuration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| apply_noise(500.0, 500.0, 0.2, &mut rng).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(rel(var.sqrt(), 100.0) < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn noise_is_clamped_at_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let c = apply_noise(0.02, 0.02, 50.0, &mut rng).unwrap();
            assert!(c >= NOISE_FLOOR_PF);
        }
    }

    #[test]
    fn global_noise_mode_uses_high_nominal() {
        let p = SensorParams {
            noise_mode: NoiseMode::Global,
            ..SensorParams::default()
        };
        assert_eq!(p.noise_sigma(16.77), 100.0);
        assert!((SensorParams::default().noise_sigma(16.77) - 3.354).abs() < 1e-12);
    }

    #[test]
    fn params_validation() {
        assert!(SensorParams::default().validate().is_ok());
        let bad = SensorParams {
            c_ih: 10.0,
            c_il: 20.0,
            ..SensorParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let (_, trace) = mac_evaluate_traced(&[36.0], &[1.0], 72.0).unwrap();
        let csv = trace_csv(&trace, [87.5; 4]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "unit_index,phase,CL,MUL,CON,ADD,charge_pC,voltage_V,time_ns"
        );
        assert_eq!(lines[2], "0,charge,0,1,0,0,36,1,87.5");
        assert_eq!(lines[4], "0,sum,0,0,1,1,36,0.5,262.5");
    }

    #[test]
    fn induced_inverts_series() {
        let cs = series_capacitance(123.4, 72.0).unwrap();
        assert!(rel(induced_from_series(cs, 72.0).unwrap(), 123.4) < 1e-12);
        assert!(induced_from_series(72.0, 72.0).is_err());
    }
}
