use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::nmf::K_NOISE;

/// Settings of the Monte-Carlo EM separation.
///
/// The first E-step runs `mh_iters_first` sweeps and discards
/// `burn_in_first`; later E-steps start from the previous chain state and
/// run `mh_iters` sweeps with `burn_in` discarded. From the post-burn-in
/// sweeps, `samples` states are retained with uniform thinning.
#[derive(Debug, Clone, PartialEq)]
pub struct McemConfig {
    pub em_iters: usize,
    pub mh_iters_first: usize,
    pub burn_in_first: usize,
    pub mh_iters: usize,
    pub burn_in: usize,
    pub samples: usize,
    /// Random-walk standard deviation.
    pub epsilon: f64,
    pub variance_floor: f64,
    pub gain_floor: f64,
    pub noise_rank: usize,
    /// Stop once the relative change of Q drops below this; 0 disables.
    pub tolerance: f64,
    /// Extra sweeps at the final parameters before estimating the sources;
    /// 0 reuses the last E-step's retained samples.
    pub final_sweeps: usize,
    pub seed: u64,
}

impl Default for McemConfig {
    fn default() -> Self {
        Self {
            em_iters: 100,
            mh_iters_first: 40,
            burn_in_first: 30,
            mh_iters: 10,
            burn_in: 0,
            samples: 10,
            epsilon: 0.01,
            variance_floor: 1e-6,
            gain_floor: 1e-10,
            noise_rank: K_NOISE,
            tolerance: 1e-4,
            final_sweeps: 0,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "em_iters",
    "mh_iters_first",
    "burn_in_first",
    "mh_iters",
    "burn_in",
    "samples",
    "epsilon",
    "variance_floor",
    "gain_floor",
    "noise_rank",
    "tolerance",
    "final_sweeps",
    "seed",
];

impl McemConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.samples == 0 {
            return err("samples (R) must be at least 1");
        }
        if self.mh_iters < self.burn_in + self.samples {
            return err("mh_iters must be >= burn_in + samples");
        }
        if self.mh_iters_first < self.burn_in_first + self.samples {
            return err("mh_iters_first must be >= burn_in_first + samples");
        }
        if self.final_sweeps != 0 && self.final_sweeps < self.samples {
            return err("final_sweeps must be 0 or >= samples");
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return err("epsilon must be finite and >= 0");
        }
        if !(self.variance_floor > 0.0) || !(self.gain_floor > 0.0) {
            return err("floors must be positive");
        }
        if self.noise_rank == 0 {
            return err("noise_rank must be at least 1");
        }
        if !(self.tolerance >= 0.0) {
            return err("tolerance must be >= 0");
        }
        Ok(())
    }

    /// Reads known keys from a flat config, defaulting the rest.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.ensure_known(KEYS)?;
        let d = Self::default();
        let cfg = Self {
            em_iters: kv.get_or("em_iters", d.em_iters)?,
            mh_iters_first: kv.get_or("mh_iters_first", d.mh_iters_first)?,
            burn_in_first: kv.get_or("burn_in_first", d.burn_in_first)?,
            mh_iters: kv.get_or("mh_iters", d.mh_iters)?,
            burn_in: kv.get_or("burn_in", d.burn_in)?,
            samples: kv.get_or("samples", d.samples)?,
            epsilon: kv.get_or("epsilon", d.epsilon)?,
            variance_floor: kv.get_or("variance_floor", d.variance_floor)?,
            gain_floor: kv.get_or("gain_floor", d.gain_floor)?,
            noise_rank: kv.get_or("noise_rank", d.noise_rank)?,
            tolerance: kv.get_or("tolerance", d.tolerance)?,
            final_sweeps: kv.get_or("final_sweeps", d.final_sweeps)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("em_iters", self.em_iters);
        kv.set("mh_iters_first", self.mh_iters_first);
        kv.set("burn_in_first", self.burn_in_first);
        kv.set("mh_iters", self.mh_iters);
        kv.set("burn_in", self.burn_in);
        kv.set("samples", self.samples);
        kv.set("epsilon", self.epsilon);
        kv.set("variance_floor", self.variance_floor);
        kv.set("gain_floor", self.gain_floor);
        kv.set("noise_rank", self.noise_rank);
        kv.set("tolerance", self.tolerance);
        kv.set("final_sweeps", self.final_sweeps);
        kv.set("seed", self.seed);
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let cfg = McemConfig {
            em_iters: 7,
            epsilon: 0.25,
            seed: 99,
            ..Default::default()
        };
        let text = cfg.to_kv().to_string();
        assert_eq!(McemConfig::from_kv(&KvConfig::parse(&text).unwrap()).unwrap(), cfg);
    }

    #[test]
    fn rejects_inconsistent_schedules() {
        let kv = KvConfig::parse("mh_iters = 5\nsamples = 10").unwrap();
        assert!(McemConfig::from_kv(&kv).is_err());
        let kv = KvConfig::parse("unknown = 1").unwrap();
        assert!(McemConfig::from_kv(&kv).is_err());
        let kv = KvConfig::parse("samples = 0").unwrap();
        assert!(McemConfig::from_kv(&kv).is_err());
    }
}
