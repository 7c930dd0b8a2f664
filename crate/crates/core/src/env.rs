//! Photometric test rig: ambient light plus LED output seen through a 10-bit
//! ADC, smoothed with an exponential moving average and binned into 64 states.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rl::{StateIndex, TargetLabel, TargetLevel, NUM_STATES};

/// Full-scale ADC reading (10-bit).
pub const ADC_MAX: u16 = 1023;

/// ADC counts per discrete state.
pub const BIN_WIDTH: f64 = 16.0;

/// Maximum PWM duty.
pub const PWM_MAX: u8 = 255;

/// Simulated wall time of one control step.
pub const CONTROL_PERIOD_MS: u64 = 50;

/// LED duty in `0..=255`.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct PwmLevel(u8);

impl PwmLevel {
    pub const OFF: PwmLevel = PwmLevel(0);
    pub const FULL: PwmLevel = PwmLevel(PWM_MAX);

    pub fn new(duty: u8) -> Self {
        PwmLevel(duty)
    }

    /// Clamps any integer duty into range.
    pub fn saturating(duty: i64) -> Self {
        PwmLevel(duty.clamp(0, PWM_MAX as i64) as u8)
    }

    pub fn duty(self) -> u8 {
        self.0
    }

    pub fn offset(self, delta: i32) -> Self {
        PwmLevel::saturating(self.0 as i64 + delta as i64)
    }

    pub fn fraction(self) -> f64 {
        self.0 as f64 / PWM_MAX as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdcReading {
    pub raw: u16,
    pub smoothed: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisturbanceKind {
    /// Fast rise to `magnitude`, then exponential decay back to zero by the end of the window.
    Spike,
    /// Constant offset over the window.
    Step,
    /// Offset alternating between `+magnitude` and `-magnitude` every step.
    Flicker,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceEvent {
    pub kind: DisturbanceKind,
    pub start_step: u64,
    pub duration_steps: u64,
    /// Signed ADC counts.
    pub magnitude: f64,
}

impl DisturbanceEvent {
    pub fn validate(&self) -> Result<()> {
        if self.duration_steps == 0 {
            return Err(Error::validation("disturbance duration_steps must be >= 1"));
        }
        if !self.magnitude.is_finite() {
            return Err(Error::validation("disturbance magnitude must be finite"));
        }
        Ok(())
    }

    pub fn end_step(&self) -> u64 {
        self.start_step.saturating_add(self.duration_steps)
    }

    pub fn is_active(&self, t: u64) -> bool {
        t >= self.start_step && t < self.end_step()
    }

    /// Additive ambient contribution at step `t`.
    pub fn offset_at(&self, t: u64) -> f64 {
        if !self.is_active(t) {
            return 0.0;
        }
        let tau = (t - self.start_step) as f64;
        let m = self.magnitude;
        match self.kind {
            DisturbanceKind::Step => m,
            DisturbanceKind::Flicker => {
                if (t - self.start_step).is_multiple_of(2) {
                    m
                } else {
                    -m
                }
            }
            DisturbanceKind::Spike => {
                let duration = self.duration_steps as f64;
                let rise = (duration / 5.0).floor().max(1.0);
                if tau <= rise {
                    return m * tau / rise;
                }
                // Tail normalised so it reaches exactly zero at the end of the window.
                let span = duration - rise;
                let x = tau - rise;
                let k = 5.0 / span;
                let floor = (-k * span).exp();
                m * ((-k * x).exp() - floor) / (1.0 - floor)
            }
        }
    }
}

/// Ambient light profile: a constant baseline plus additive disturbance events.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Ambient contribution in ADC counts.
    pub baseline: f64,
    #[serde(default)]
    pub events: Vec<DisturbanceEvent>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            baseline: 56.0,
            events: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn constant(baseline: f64) -> Self {
        Scenario {
            baseline,
            events: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.baseline.is_finite() || self.baseline < 0.0 {
            return Err(Error::validation(
                "scenario baseline must be finite and >= 0",
            ));
        }
        self.events.iter().try_for_each(DisturbanceEvent::validate)
    }

    /// Ambient counts at step `t`; overlapping events are summed and the result clamped at zero.
    pub fn ambient(&self, t: u64) -> f64 {
        let sum: f64 = self.events.iter().map(|e| e.offset_at(t)).sum();
        (self.baseline + sum).max(0.0)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let s: Scenario = serde_json::from_str(&text)?;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvModel {
    pub scenario: Scenario,
    /// ADC counts contributed by the LED at full duty.
    pub led_gain: f64,
    pub sensor_noise_sigma: f64,
    pub smoothing_alpha: f64,
    pub response_lag_steps: usize,
    pub rng_seed: u64,
}

impl Default for EnvModel {
    fn default() -> Self {
        EnvModel {
            scenario: Scenario::default(),
            led_gain: 1275.0,
            sensor_noise_sigma: 4.0,
            smoothing_alpha: 0.5,
            response_lag_steps: 0,
            rng_seed: 0,
        }
    }
}

impl EnvModel {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if !(self.led_gain >= 0.0 && self.led_gain.is_finite()) {
            return Err(Error::validation("led_gain must be finite and >= 0"));
        }
        if !(self.sensor_noise_sigma >= 0.0 && self.sensor_noise_sigma.is_finite()) {
            return Err(Error::validation(
                "sensor_noise_sigma must be finite and >= 0",
            ));
        }
        if !(self.smoothing_alpha > 0.0 && self.smoothing_alpha <= 1.0) {
            return Err(Error::validation("smoothing_alpha must be in (0, 1]"));
        }
        Ok(())
    }

    /// Noise-free, lag-free and unsmoothed: every step is a pure function of ambient and duty.
    pub fn is_deterministic(&self) -> bool {
        self.sensor_noise_sigma == 0.0
            && self.response_lag_steps == 0
            && self.smoothing_alpha == 1.0
    }

    /// Expected (noise-free) raw reading for an ambient level and duty.
    pub fn raw_for(&self, ambient: f64, pwm: PwmLevel) -> u16 {
        quantize(ambient + self.led_gain * pwm.fraction())
    }
}

fn quantize(counts: f64) -> u16 {
    counts.round().clamp(0.0, ADC_MAX as f64) as u16
}

/// Adds `event` to the model's ambient profile.
pub fn inject_disturbance(model: &EnvModel, event: DisturbanceEvent) -> Result<EnvModel> {
    event.validate()?;
    let mut out = model.clone();
    out.scenario.events.push(event);
    Ok(out)
}

/// Exponential moving average step.
pub fn smooth_reading(previous: f64, raw: f64, alpha: f64) -> f64 {
    previous + alpha * (raw - previous)
}

/// Maps a smoothed reading onto one of the 64 states (16 counts per state).
pub fn discretize(smoothed: f64) -> Result<StateIndex> {
    if !(0.0..=ADC_MAX as f64).contains(&smoothed) {
        return Err(Error::validation(format!(
            "reading {smoothed} outside 0..={ADC_MAX}"
        )));
    }
    let bin = ((smoothed / BIN_WIDTH).floor() as usize).min(NUM_STATES - 1);
    StateIndex::new(bin)
}

/// Target state for `L_i` is `3 + 5 (i - 1)`: states 3, 8, ..., 63.
pub fn target_band(label: TargetLabel) -> TargetLevel {
    let state = 3 + 5 * (label.level() - 1);
    TargetLevel {
        label,
        target_state: StateIndex::new(state).expect("target states lie in 0..64"),
    }
}

/// Lower edge, in counts, of a state's bin.
pub fn bin_floor(s: StateIndex) -> f64 {
    s.get() as f64 * BIN_WIDTH
}

/// Centre, in counts, of a state's bin.
pub fn bin_center(s: StateIndex) -> f64 {
    bin_floor(s) + BIN_WIDTH / 2.0
}

/// One running instance of an [`EnvModel`]: owns the step counter, the noise
/// stream, the smoothing state and the actuator delay line.
#[derive(Clone, Debug)]
pub struct Environment {
    model: EnvModel,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    t: u64,
    smoothed: Option<f64>,
    delay_line: VecDeque<PwmLevel>,
}

impl Environment {
    pub fn new(model: EnvModel) -> Result<Self> {
        model.validate()?;
        let noise = if model.sensor_noise_sigma > 0.0 {
            Some(
                Normal::new(0.0, model.sensor_noise_sigma)
                    .map_err(|e| Error::validation(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Environment {
            rng: ChaCha8Rng::seed_from_u64(model.rng_seed),
            noise,
            t: 0,
            smoothed: None,
            delay_line: VecDeque::with_capacity(model.response_lag_steps + 1),
            model,
        })
    }

    pub fn model(&self) -> &EnvModel {
        &self.model
    }

    /// Index of the next step to be simulated.
    pub fn time(&self) -> u64 {
        self.t
    }

    pub fn ambient_now(&self) -> f64 {
        self.model.scenario.ambient(self.t)
    }

    /// Advances one control step with `pwm` commanded and returns the new reading.
    ///
    /// The first call seeds the smoothing filter with the raw value.
    pub fn step(&mut self, pwm: PwmLevel) -> AdcReading {
        let lag = self.model.response_lag_steps;
        self.delay_line.push_back(pwm);
        while self.delay_line.len() > lag + 1 {
            self.delay_line.pop_front();
        }
        let effective = self.delay_line[0];

        let ambient = self.model.scenario.ambient(self.t);
        let noise = match &self.noise {
            Some(n) => n.sample(&mut self.rng),
            None => 0.0,
        };
        let raw = quantize(ambient + self.model.led_gain * effective.fraction() + noise);
        let smoothed = match self.smoothed {
            None => raw as f64,
            Some(prev) => smooth_reading(prev, raw as f64, self.model.smoothing_alpha),
        };
        self.smoothed = Some(smoothed);
        self.t += 1;
        AdcReading { raw, smoothed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quiet(baseline: f64, gain: f64) -> EnvModel {
        EnvModel {
            scenario: Scenario::constant(baseline),
            led_gain: gain,
            sensor_noise_sigma: 0.0,
            smoothing_alpha: 1.0,
            response_lag_steps: 0,
            rng_seed: 0,
        }
    }

    #[test]
    fn dark_chamber_led_off() {
        let mut env = Environment::new(quiet(0.0, 800.0)).unwrap();
        assert_eq!(env.step(PwmLevel::OFF).raw, 0);
    }

    #[test]
    fn full_duty_gives_full_gain() {
        let mut env = Environment::new(quiet(0.0, 800.0)).unwrap();
        assert_eq!(env.step(PwmLevel::FULL).raw, 800);
    }

    #[test]
    fn ambient_baseline_calibration_point() {
        let mut env = Environment::new(quiet(260.0, 800.0)).unwrap();
        assert_eq!(env.step(PwmLevel::OFF).raw, 260);
    }

    #[test]
    fn raw_saturates_at_full_scale() {
        let mut env = Environment::new(quiet(500.0, 1275.0)).unwrap();
        assert_eq!(env.step(PwmLevel::FULL).raw, ADC_MAX);
    }

    #[test]
    fn lag_delays_the_commanded_duty() {
        let model = EnvModel {
            response_lag_steps: 2,
            ..quiet(0.0, 255.0)
        };
        let mut env = Environment::new(model).unwrap();
        let raws: Vec<u16> = [0u8, 100, 100, 100, 200]
            .iter()
            .map(|&d| env.step(PwmLevel::new(d)).raw)
            .collect();
        assert_eq!(raws, vec![0, 0, 0, 100, 100]);
    }

    #[test]
    fn smoothing_examples() {
        assert_eq!(smooth_reading(17.0, 42.0, 1.0), 42.0);
        assert!((smooth_reading(260.0, 650.0, 0.2) - 338.0).abs() < 1e-12);
        let mut v = 0.0;
        for _ in 0..500 {
            v = smooth_reading(v, 300.0, 0.2);
        }
        assert!((v - 300.0).abs() < 1e-9);
    }

    #[test]
    fn discretize_edges() {
        assert_eq!(discretize(0.0).unwrap().get(), 0);
        assert_eq!(discretize(1023.0).unwrap().get(), 63);
        assert_eq!(discretize(260.0).unwrap().get(), 16);
        assert_eq!(discretize(15.999).unwrap().get(), 0);
        assert_eq!(discretize(16.0).unwrap().get(), 1);
        assert!(discretize(-0.5).is_err());
        assert!(discretize(1023.5).is_err());
    }

    #[test]
    fn target_band_mapping() {
        let states: Vec<usize> = TargetLabel::all()
            .map(|l| target_band(l).target_state.get())
            .collect();
        assert_eq!(states[0], 3);
        assert_eq!(states[6], 33);
        assert_eq!(states[12], 63);
        assert!(states.windows(2).all(|w| w[0] < w[1]));
        assert!("L14".parse::<TargetLabel>().is_err());
    }

    #[test]
    fn spike_reaches_peak_and_returns_to_baseline() {
        let event = DisturbanceEvent {
            kind: DisturbanceKind::Spike,
            start_step: 10,
            duration_steps: 50,
            magnitude: 390.0,
        };
        let model = inject_disturbance(&quiet(260.0, 1275.0), event).unwrap();
        let mut env = Environment::new(model.clone()).unwrap();
        // LED at the duty that holds L4 under this baseline.
        let raws: Vec<u16> = (0..80).map(|_| env.step(PwmLevel::new(8)).raw).collect();
        let peak = *raws[10..60].iter().max().unwrap();
        assert!(peak > 650, "peak {peak}");
        assert_eq!(raws[9], 300);
        assert_eq!(raws[60], 300);
        assert!((model.scenario.ambient(59) - 260.0) < 10.0);
        // Rises first, then decays monotonically.
        let amb: Vec<f64> = (10..60).map(|t| model.scenario.ambient(t)).collect();
        let top = amb.iter().cloned().fold(f64::MIN, f64::max);
        let top_at = amb.iter().position(|&a| a == top).unwrap();
        assert!(amb[..=top_at].windows(2).all(|w| w[0] <= w[1]));
        assert!(amb[top_at..].windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn zero_step_leaves_ambient_unchanged() {
        let base = quiet(260.0, 0.0);
        let model = inject_disturbance(
            &base,
            DisturbanceEvent {
                kind: DisturbanceKind::Step,
                start_step: 0,
                duration_steps: 100,
                magnitude: 0.0,
            },
        )
        .unwrap();
        for t in 0..120 {
            assert_eq!(model.scenario.ambient(t), 260.0);
        }
    }

    #[test]
    fn lights_off_step_clamps_at_zero() {
        let model = inject_disturbance(
            &quiet(260.0, 0.0),
            DisturbanceEvent {
                kind: DisturbanceKind::Step,
                start_step: 5,
                duration_steps: 10,
                magnitude: -300.0,
            },
        )
        .unwrap();
        assert_eq!(model.scenario.ambient(4), 260.0);
        assert_eq!(model.scenario.ambient(5), 0.0);
        assert_eq!(model.scenario.ambient(14), 0.0);
        assert_eq!(model.scenario.ambient(15), 260.0);
        let exact = inject_disturbance(
            &quiet(260.0, 0.0),
            DisturbanceEvent {
                kind: DisturbanceKind::Step,
                start_step: 0,
                duration_steps: 3,
                magnitude: -260.0,
            },
        )
        .unwrap();
        assert_eq!(exact.scenario.ambient(1), 0.0);
    }

    #[test]
    fn flicker_alternates() {
        let e = DisturbanceEvent {
            kind: DisturbanceKind::Flicker,
            start_step: 3,
            duration_steps: 4,
            magnitude: 20.0,
        };
        let offs: Vec<f64> = (2..8).map(|t| e.offset_at(t)).collect();
        assert_eq!(offs, vec![0.0, 20.0, -20.0, 20.0, -20.0, 0.0]);
    }

    #[test]
    fn zero_duration_event_rejected() {
        let e = DisturbanceEvent {
            kind: DisturbanceKind::Step,
            start_step: 0,
            duration_steps: 0,
            magnitude: 1.0,
        };
        assert!(inject_disturbance(&EnvModel::default(), e).is_err());
    }

    #[test]
    fn scenario_json_shape() {
        let text = r#"{"baseline": 260, "events": [{"kind": "spike", "start_step": 5, "duration_steps": 50, "magnitude": 390}]}"#;
        let s: Scenario = serde_json::from_str(text).unwrap();
        assert_eq!(s.events[0].kind, DisturbanceKind::Spike);
        assert!(serde_json::from_str::<Scenario>(r#"{"baseline": 1, "events": [{"kind": "wobble", "start_step": 0, "duration_steps": 1, "magnitude": 0}]}"#).is_err());
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let model = EnvModel {
            rng_seed: 99,
            ..EnvModel::default()
        };
        let run = || {
            let mut env = Environment::new(model.clone()).unwrap();
            (0..200)
                .map(|i| env.step(PwmLevel::new(i as u8)).smoothed.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    fn event_strategy() -> impl Strategy<Value = DisturbanceEvent> {
        (0u8..3, 0u64..50, 1u64..60, -400.0f64..400.0).prop_map(|(k, start, dur, mag)| {
            DisturbanceEvent {
                kind: match k {
                    0 => DisturbanceKind::Spike,
                    1 => DisturbanceKind::Step,
                    _ => DisturbanceKind::Flicker,
                },
                start_step: start,
                duration_steps: dur,
                magnitude: mag,
            }
        })
    }

    proptest! {
        #[test]
        fn noise_free_step_is_pure(ambient in 0.0f64..1023.0, duty in 0u8..=255) {
            let model = quiet(ambient, 800.0);
            let a = Environment::new(model.clone()).unwrap().step(PwmLevel::new(duty));
            let b = Environment::new(model).unwrap().step(PwmLevel::new(duty));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn raw_monotone_in_duty(lo in 0u8..=255, hi in 0u8..=255, gain in 0.0f64..2000.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let model = quiet(0.0, gain);
            let a = Environment::new(model.clone()).unwrap().step(PwmLevel::new(lo)).raw;
            let b = Environment::new(model).unwrap().step(PwmLevel::new(hi)).raw;
            prop_assert!(a <= b);
        }

        #[test]
        fn discretize_monotone(x in 0.0f64..=1023.0, y in 0.0f64..=1023.0) {
            let (x, y) = if x <= y { (x, y) } else { (y, x) };
            prop_assert!(discretize(x).unwrap() <= discretize(y).unwrap());
        }

        #[test]
        fn ema_error_bound(start in 0.0f64..1023.0, r in 0.0f64..1023.0, alpha in 0.01f64..=1.0, n in 0usize..200) {
            let mut v = start;
            for _ in 0..n {
                v = smooth_reading(v, r, alpha);
            }
            let bound = (1.0 - alpha).powi(n as i32) * (start - r).abs();
            prop_assert!((v - r).abs() <= bound + 1e-9);
        }

        #[test]
        fn ema_stays_within_raw_envelope(raws in proptest::collection::vec(0u16..=1023, 1..100), alpha in 0.01f64..=1.0) {
            let mut v = raws[0] as f64;
            let (mut lo, mut hi) = (v, v);
            for &r in &raws[1..] {
                lo = lo.min(r as f64);
                hi = hi.max(r as f64);
                v = smooth_reading(v, r as f64, alpha);
                prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
        }

        #[test]
        fn disturbances_compose_additively(a in event_strategy(), b in event_strategy(), t in 0u64..120) {
            let base = quiet(500.0, 0.0);
            let ab = inject_disturbance(&inject_disturbance(&base, a).unwrap(), b).unwrap();
            let ba = inject_disturbance(&inject_disturbance(&base, b).unwrap(), a).unwrap();
            let expected = (500.0 + a.offset_at(t) + b.offset_at(t)).max(0.0);
            prop_assert!((ab.scenario.ambient(t) - expected).abs() < 1e-9);
            prop_assert!((ab.scenario.ambient(t) - ba.scenario.ambient(t)).abs() < 1e-9);
        }
    }

    #[test]
    fn discretize_is_surjective() {
        let mut seen = [false; NUM_STATES];
        for x in 0..=1023 {
            seen[discretize(x as f64).unwrap().get()] = true;
        }
        assert!(seen.iter().all(|&b| b));
    }
}
