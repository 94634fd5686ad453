use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::isa::RegisterModel;

use super::SimError;

/// Largest thread group the hardware accepts.
pub const MAX_GROUP_SIZE: usize = 1024;

/// What an uninitialized register read returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    /// Cells keep whatever the previous shader on the SIMD unit left behind.
    NoClear,
    /// Reads return the last coalesced half-wave store issued on the SIMD unit.
    StoreResidue,
    /// Cells read as zero until written by the current shader.
    ZeroOnAlloc,
}

/// Architectural-to-physical register mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemapPolicy {
    Identity,
    /// Per-dispatch seeded bijection over the physical file.
    SeededPermutation,
}

/// Order in which the two half-wave bus transactions of a coalesced store issue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HalfWaveOrder {
    /// Lanes 0-15 first; the residue keeps the upper half.
    LowerFirst,
    /// Lanes 16-31 first; the residue keeps the lower half.
    UpperFirst,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuConfig {
    pub num_cores: usize,
    pub simd_per_core: usize,
    pub wave_width: usize,
    /// 32-bit register cells available to one thread.
    pub regs_per_thread: usize,
    pub register_model: RegisterModel,
    pub lifecycle: Lifecycle,
    pub remap: RemapPolicy,
    pub half_wave_order: HalfWaveOrder,
    pub seed: u64,
}

impl GpuConfig {
    /// Cells per half-wave bus transaction.
    pub fn half_wave(&self) -> usize {
        (self.wave_width / 2).max(1)
    }

    pub fn simd_count(&self) -> usize {
        self.num_cores * self.simd_per_core
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidConfig(msg.to_string()));
        if self.num_cores == 0 || self.simd_per_core == 0 {
            return bad("cores and simd_per_core must be positive");
        }
        if self.wave_width == 0 || self.wave_width > MAX_GROUP_SIZE || !self.wave_width.is_multiple_of(2) {
            return bad("wave_width must be even and in 2..=1024");
        }
        if self.regs_per_thread == 0 || self.regs_per_thread > 4096 {
            return bad("regs_per_thread must be in 1..=4096");
        }
        if self.register_model == RegisterModel::Quad && !self.regs_per_thread.is_multiple_of(4) {
            return bad("quad register model needs regs_per_thread divisible by 4");
        }
        Ok(())
    }

    pub fn with_lifecycle(mut self, lifecycle: Lifecycle) -> Self {
        self.lifecycle = lifecycle;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_remap(mut self, remap: RemapPolicy) -> Self {
        self.remap = remap;
        self
    }

    /// Parses the `key = value` config format, optionally starting from a named profile
    /// (`profile = "agx"`) and overriding individual keys.
    pub fn from_config_str(text: &str) -> Result<Self, SimError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            profile: Option<String>,
            cores: Option<usize>,
            simd_per_core: Option<usize>,
            wave_width: Option<usize>,
            regs_per_thread: Option<usize>,
            register_model: Option<RegisterModel>,
            lifecycle: Option<Lifecycle>,
            remap: Option<RemapPolicy>,
            half_wave_order: Option<HalfWaveOrder>,
            seed: Option<u64>,
        }
        let raw: Raw = toml::from_str(text).map_err(|e| SimError::InvalidConfig(e.message().to_string()))?;
        let mut cfg = match raw.profile.as_deref() {
            Some(name) => name.parse::<Profile>()?.config(),
            None => GpuConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = raw.$field { cfg.$target = v; })*
            };
        }
        set!(cores => num_cores, simd_per_core => simd_per_core, wave_width => wave_width,
             regs_per_thread => regs_per_thread, register_model => register_model,
             lifecycle => lifecycle, remap => remap, half_wave_order => half_wave_order, seed => seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Renders the config in the format read by [`from_config_str`](Self::from_config_str).
    pub fn to_config_string(&self) -> String {
        fn name<T: Serialize>(v: &T) -> String {
            toml::Value::try_from(v).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
        }
        format!(
            "cores = {}\nsimd_per_core = {}\nwave_width = {}\nregs_per_thread = {}\nregister_model = \"{}\"\nlifecycle = \"{}\"\nremap = \"{}\"\nhalf_wave_order = \"{}\"\nseed = {}\n",
            self.num_cores,
            self.simd_per_core,
            self.wave_width,
            self.regs_per_thread,
            name(&self.register_model),
            name(&self.lifecycle),
            name(&self.remap),
            name(&self.half_wave_order),
            self.seed
        )
    }
}

impl Default for GpuConfig {
    fn default() -> Self {
        GpuConfig {
            num_cores: 4,
            simd_per_core: 4,
            wave_width: 32,
            regs_per_thread: 128,
            register_model: RegisterModel::Flat,
            lifecycle: Lifecycle::NoClear,
            remap: RemapPolicy::Identity,
            half_wave_order: HalfWaveOrder::LowerFirst,
            seed: 0,
        }
    }
}

/// Named vendor behavior bundles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Profile {
    /// 64 quad registers, no clearing, stable mapping.
    Adreno,
    /// 128 flat registers, no clearing, mapping reshuffled per dispatch.
    Agx,
    /// Stale reads expose the last coalesced half-wave store.
    Nvidia,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Profile::Adreno, Profile::Agx, Profile::Nvidia];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Adreno => "adreno",
            Profile::Agx => "agx",
            Profile::Nvidia => "nvidia",
        }
    }

    pub fn config(self) -> GpuConfig {
        match self {
            Profile::Adreno => GpuConfig {
                num_cores: 4,
                simd_per_core: 8,
                regs_per_thread: 256,
                register_model: RegisterModel::Quad,
                lifecycle: Lifecycle::NoClear,
                remap: RemapPolicy::Identity,
                ..GpuConfig::default()
            },
            Profile::Agx => GpuConfig {
                num_cores: 8,
                simd_per_core: 8,
                regs_per_thread: 128,
                register_model: RegisterModel::Flat,
                lifecycle: Lifecycle::NoClear,
                remap: RemapPolicy::SeededPermutation,
                ..GpuConfig::default()
            },
            Profile::Nvidia => GpuConfig {
                num_cores: 8,
                simd_per_core: 4,
                regs_per_thread: 64,
                register_model: RegisterModel::Flat,
                lifecycle: Lifecycle::StoreResidue,
                remap: RemapPolicy::Identity,
                half_wave_order: HalfWaveOrder::UpperFirst,
                ..GpuConfig::default()
            },
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Profile::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| SimError::UnknownProfile(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_valid() {
        for p in Profile::ALL {
            p.config().validate().unwrap();
            assert_eq!(p.config().wave_width, 32);
            assert_eq!(p.name().parse::<Profile>().unwrap(), p);
        }
        assert_eq!(Profile::Adreno.config().regs_per_thread, 256);
        assert_eq!(Profile::Agx.config().regs_per_thread, 128);
    }

    #[test]
    fn unknown_profile_names_the_valid_ones() {
        let err = "mali".parse::<Profile>().unwrap_err().to_string();
        for p in Profile::ALL {
            assert!(err.contains(p.name()), "{err}");
        }
    }

    #[test]
    fn config_text_round_trips() {
        for p in Profile::ALL {
            let cfg = p.config().with_seed(99);
            assert_eq!(GpuConfig::from_config_str(&cfg.to_config_string()).unwrap(), cfg);
        }
    }

    #[test]
    fn profile_with_overrides() {
        let cfg = GpuConfig::from_config_str("profile = \"nvidia\"\ncores = 2\nlifecycle = \"zero_on_alloc\"\n").unwrap();
        assert_eq!(cfg.num_cores, 2);
        assert_eq!(cfg.lifecycle, Lifecycle::ZeroOnAlloc);
        assert_eq!(cfg.half_wave_order, HalfWaveOrder::UpperFirst);
        assert!(GpuConfig::from_config_str("cores = 0").is_err());
        assert!(GpuConfig::from_config_str("bogus = 1").is_err());
        assert!(GpuConfig::from_config_str("wave_width = 31").is_err());
    }
}
