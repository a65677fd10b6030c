use crate::config_file::Section;
use crate::error::{Error, Result};
use crate::hessian::SUPPORTED_SCALES;

/// DIV2K training-set channel means on a `[0, 1]` scale.
pub const DIV2K_RGB_MEAN: [f64; 3] = [0.4488, 0.4371, 0.4040];

pub const SUPPORTED_UPSCALES: [usize; 3] = [2, 3, 4];

/// Which attention components a module builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Components {
    pub mshf: bool,
    pub diendec: bool,
    pub dac: bool,
}

impl Components {
    pub const ALL: Self = Self {
        mshf: true,
        diendec: true,
        dac: true,
    };
    pub const NONE: Self = Self {
        mshf: false,
        diendec: false,
        dac: false,
    };

    pub fn label(self) -> String {
        let parts: Vec<&str> = [(self.mshf, "mshf"), (self.diendec, "diendec"), (self.dac, "dac")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    /// All eight on/off combinations, `NONE` first and `ALL` last.
    pub fn all_combinations() -> Vec<Self> {
        (0..8u8)
            .map(|bits| Self {
                mshf: bits & 1 != 0,
                diendec: bits & 2 != 0,
                dac: bits & 4 != 0,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_modules: usize,
    pub n_blocks: usize,
    pub channels: usize,
    pub scale: usize,
    pub mshf_scales: Vec<usize>,
    pub components: Components,
    /// Per-channel mean on a `[0, 1]` scale; multiplied by `rgb_range`.
    pub rgb_mean: [f64; 3],
    pub rgb_range: f64,
    pub ca_reduction: usize,
    pub dac_reduction: usize,
    pub diendec_width: usize,
    pub dac_eps: f64,
}

impl ModelConfig {
    fn base(n_modules: usize, n_blocks: usize, channels: usize, scale: usize) -> Self {
        Self {
            n_modules,
            n_blocks,
            channels,
            scale,
            mshf_scales: SUPPORTED_SCALES.to_vec(),
            components: Components::ALL,
            rgb_mean: DIV2K_RGB_MEAN,
            rgb_range: 1.0,
            ca_reduction: 16,
            dac_reduction: 4,
            diendec_width: 16,
            dac_eps: crate::dac::DEFAULT_EPS,
        }
    }

    /// 5 modules, 10 blocks each, 32 channels.
    pub fn defian_s(scale: usize) -> Self {
        Self::base(5, 10, 32, scale)
    }

    /// 10 modules, 20 blocks each, 64 channels.
    pub fn defian_l(scale: usize) -> Self {
        Self::base(10, 20, 64, scale)
    }

    /// One module with one block; used for desk-scale training and gradient checks.
    pub fn micro(channels: usize, scale: usize) -> Self {
        Self::base(1, 1, channels, scale)
    }

    pub fn preset(name: &str, scale: usize) -> Result<Self> {
        match name {
            "defian_s" => Ok(Self::defian_s(scale)),
            "defian_l" => Ok(Self::defian_l(scale)),
            "micro" => Ok(Self::micro(8, scale)),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset {other:?}; expected defian_s, defian_l or micro"
            ))),
        }
    }

    pub fn with_components(mut self, components: Components) -> Self {
        self.components = components;
        self
    }

    /// Input channels of the encoder-decoder.
    pub fn diendec_inputs(&self) -> usize {
        if self.components.mshf {
            self.mshf_scales.len()
        } else {
            3
        }
    }

    /// Pixel-shuffle factors in order; 4 is two stages of 2.
    pub fn upsample_stages(&self) -> Vec<usize> {
        match self.scale {
            4 => vec![2, 2],
            s => vec![s],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(None, format!("model.{field}"), msg));
        if !SUPPORTED_UPSCALES.contains(&self.scale) {
            return bad("scale", format!("{} is not one of {SUPPORTED_UPSCALES:?}", self.scale));
        }
        if self.channels == 0 {
            return bad("channels", "must be positive".into());
        }
        if self.components.mshf {
            if self.mshf_scales.is_empty() {
                return bad("mshf_scales", "must not be empty while mshf is enabled".into());
            }
            for k in &self.mshf_scales {
                if !SUPPORTED_SCALES.contains(k) {
                    return bad("mshf_scales", format!("{k} is not one of {SUPPORTED_SCALES:?}"));
                }
            }
            let mut sorted = self.mshf_scales.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.mshf_scales.len() {
                return bad("mshf_scales", "contains duplicates".into());
            }
        }
        for (field, v) in [
            ("ca_reduction", self.ca_reduction),
            ("dac_reduction", self.dac_reduction),
            ("diendec_width", self.diendec_width),
        ] {
            if v == 0 {
                return bad(field, "must be positive".into());
            }
        }
        if !(self.rgb_range > 0.0 && self.rgb_range.is_finite()) {
            return bad("rgb_range", "must be positive and finite".into());
        }
        if !(self.dac_eps > 0.0 && self.dac_eps.is_finite()) {
            return bad("dac_eps", "must be positive".into());
        }
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "preset",
        "n_modules",
        "n_blocks",
        "channels",
        "scale",
        "mshf_scales",
        "mshf",
        "diendec",
        "dac",
        "rgb_mean",
        "rgb_range",
        "ca_reduction",
        "dac_reduction",
        "diendec_width",
        "dac_eps",
    ];

    /// Reads a `[model]` section. `preset` (default `defian_s`) and `scale`
    /// (default 2) seed the values; every other key overrides one field.
    pub fn from_section(s: &Section) -> Result<Self> {
        s.check_known(Self::KEYS)?;
        let scale = s.get_or("scale", 2usize)?;
        let preset: String = s.get_or("preset", "defian_s".to_string())?;
        let mut cfg = Self::preset(&preset, scale).map_err(|e| s.error("preset", e.to_string()))?;
        cfg.n_modules = s.get_or("n_modules", cfg.n_modules)?;
        cfg.n_blocks = s.get_or("n_blocks", cfg.n_blocks)?;
        cfg.channels = s.get_or("channels", cfg.channels)?;
        if let Some(v) = s.get_list("mshf_scales")? {
            cfg.mshf_scales = v;
        }
        cfg.components.mshf = s.get_or("mshf", cfg.components.mshf)?;
        cfg.components.diendec = s.get_or("diendec", cfg.components.diendec)?;
        cfg.components.dac = s.get_or("dac", cfg.components.dac)?;
        if let Some(v) = s.get_list::<f64>("rgb_mean")? {
            cfg.rgb_mean = v
                .try_into()
                .map_err(|v: Vec<f64>| s.error("rgb_mean", format!("expected 3 values, found {}", v.len())))?;
        }
        cfg.rgb_range = s.get_or("rgb_range", cfg.rgb_range)?;
        cfg.ca_reduction = s.get_or("ca_reduction", cfg.ca_reduction)?;
        cfg.dac_reduction = s.get_or("dac_reduction", cfg.dac_reduction)?;
        cfg.diendec_width = s.get_or("diendec_width", cfg.diendec_width)?;
        cfg.dac_eps = s.get_or("dac_eps", cfg.dac_eps)?;
        cfg.validate().map_err(|e| match e {
            Error::Config(c) => {
                let key = c.field.trim_start_matches("model.").to_string();
                s.error(&key, c.msg)
            }
            other => other,
        })?;
        Ok(cfg)
    }

    /// Fully explicit `[model]` section; `from_section` reads it back unchanged.
    pub fn to_section(&self) -> Section {
        let join = |v: &[String]| v.join(",");
        let mut s = Section::new("model");
        s.set("n_modules", self.n_modules);
        s.set("n_blocks", self.n_blocks);
        s.set("channels", self.channels);
        s.set("scale", self.scale);
        s.set(
            "mshf_scales",
            join(&self.mshf_scales.iter().map(|k| k.to_string()).collect::<Vec<_>>()),
        );
        s.set("mshf", self.components.mshf);
        s.set("diendec", self.components.diendec);
        s.set("dac", self.components.dac);
        s.set(
            "rgb_mean",
            join(&self.rgb_mean.iter().map(|m| format!("{m:?}")).collect::<Vec<_>>()),
        );
        s.set("rgb_range", format!("{:?}", self.rgb_range));
        s.set("ca_reduction", self.ca_reduction);
        s.set("dac_reduction", self.dac_reduction);
        s.set("diendec_width", self.diendec_width);
        s.set("dac_eps", format!("{:?}", self.dac_eps));
        s
    }
}
