//! Pixel-set encoder, temporal attention encoder and classifier, wired per
//! positional-encoding variant.

pub mod batch;
pub mod head;
pub mod ltae;
pub mod pse;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encodings::{FourierEncoder, PositionKind, RecurrentEncoder, SinusoidalConfig};
use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Graph, Mode, ParamStore, Tensor, Var};
use crate::rng::stream;

pub use batch::{PixelSetBatch, SequenceInput};
pub use head::Head;
pub use ltae::Ltae;
pub use pse::Pse;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    None,
    Calendar,
    #[serde(rename = "calendar_shiftaug")]
    CalendarShiftAug,
    TpeSin,
    TpeConcat,
    TpeFourier,
    TpeRecurrent,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::None,
        Variant::Calendar,
        Variant::CalendarShiftAug,
        Variant::TpeSin,
        Variant::TpeConcat,
        Variant::TpeFourier,
        Variant::TpeRecurrent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Calendar => "calendar",
            Variant::CalendarShiftAug => "calendar_shiftaug",
            Variant::TpeSin => "tpe_sin",
            Variant::TpeConcat => "tpe_concat",
            Variant::TpeFourier => "tpe_fourier",
            Variant::TpeRecurrent => "tpe_recurrent",
        }
    }

    /// Position variable the variant consumes; `None` for the position-free model.
    pub fn position_kind(self) -> Option<PositionKind> {
        match self {
            Variant::None => None,
            Variant::Calendar | Variant::CalendarShiftAug => Some(PositionKind::Calendar),
            _ => Some(PositionKind::Thermal),
        }
    }

    pub fn is_thermal(self) -> bool {
        self.position_kind() == Some(PositionKind::Thermal)
    }

    pub fn uses_shift_aug(self) -> bool {
        self == Variant::CalendarShiftAug
    }

    pub fn default_tau(self) -> f64 {
        self.position_kind().unwrap_or(PositionKind::Calendar).default_tau()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub channels: usize,
    pub classes: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub tau: f64,
    pub mlp1: Vec<usize>,
    pub decoder: Vec<usize>,
    pub concat_divisor: f64,
}

impl ModelConfig {
    /// Reference widths with the variant's default wavelength base.
    pub fn new(variant: Variant, channels: usize, classes: usize) -> Self {
        Self {
            variant,
            channels,
            classes,
            d_model: 128,
            heads: 16,
            d_k: 8,
            tau: variant.default_tau(),
            mlp1: vec![32, 64],
            decoder: vec![64, 32],
            concat_divisor: 1.0,
        }
    }

    pub fn header(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        [
            ("variant", self.variant.to_string()),
            ("channels", self.channels.to_string()),
            ("classes", self.classes.to_string()),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("d_k", self.d_k.to_string()),
            ("tau", self.tau.to_string()),
            ("mlp1", list(&self.mlp1)),
            ("decoder", list(&self.decoder)),
            ("concat_divisor", self.concat_divisor.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_header(ckpt: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ckpt.header_value(k)
                .ok_or_else(|| Error::Checkpoint(format!("header lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Checkpoint(format!("header `{k}` is not an integer")))
        };
        let real = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Checkpoint(format!("header `{k}` is not a number")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            let s = get(k)?;
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|p| p.parse().map_err(|_| Error::Checkpoint(format!("header `{k}` is not a width list"))))
                .collect()
        };
        Ok(Self {
            variant: get("variant")?.parse().map_err(|e: Error| Error::Checkpoint(e.to_string()))?,
            channels: num("channels")?,
            classes: num("classes")?,
            d_model: num("d_model")?,
            heads: num("heads")?,
            d_k: num("d_k")?,
            tau: real("tau")?,
            mlp1: list("mlp1")?,
            decoder: list("decoder")?,
            concat_divisor: real("concat_divisor")?,
        })
    }

    /// Rejects a checkpoint whose recorded config differs from `self`.
    pub fn ensure_matches(&self, other: &ModelConfig) -> Result<()> {
        let mine = self.header();
        for ((k, a), (_, b)) in mine.iter().zip(other.header()) {
            if *a != b {
                return Err(Error::Checkpoint(format!("config mismatch on `{k}`: expected {a}, found {b}")));
            }
        }
        Ok(())
    }
}

/// Additive positional encoder.
#[derive(Clone, Debug)]
pub enum PositionalEncoder {
    Sinusoidal(SinusoidalConfig),
    Fourier(FourierEncoder),
    Recurrent(RecurrentEncoder),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub pse: Pse,
    pub pe: Option<PositionalEncoder>,
    pub ltae: Ltae,
    pub head: Head,
}

impl Model {
    /// Validates the config and lays out the layers without parameters.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let v = config.variant;
        let pse = Pse::new(
            config.channels,
            &config.mlp1,
            config.d_model,
            v == Variant::TpeConcat,
            config.concat_divisor,
        )?;
        let ltae = Ltae::new(config.d_model, config.heads, config.d_k)?;
        let head = Head::new(config.d_model, &config.decoder, config.classes)?;
        let sin = || SinusoidalConfig::new(config.d_model, config.tau);
        let pe = match v {
            Variant::None | Variant::TpeConcat => None,
            Variant::Calendar | Variant::CalendarShiftAug | Variant::TpeSin => {
                Some(PositionalEncoder::Sinusoidal(sin()?))
            }
            Variant::TpeFourier => Some(PositionalEncoder::Fourier(FourierEncoder::new("pe", config.d_model)?)),
            Variant::TpeRecurrent => Some(PositionalEncoder::Recurrent(RecurrentEncoder::new("pe", sin()?)?)),
        };
        Ok(Self { config, pse, pe, ltae, head })
    }

    /// Fresh parameters; each component draws from its own named stream.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        self.pse.init(&mut store, &mut stream(seed, "init.pse"));
        match &self.pe {
            Some(PositionalEncoder::Fourier(f)) => f.init(&mut store, &mut stream(seed, "init.pe"), self.config.tau),
            Some(PositionalEncoder::Recurrent(r)) => r.init(&mut store, &mut stream(seed, "init.pe")),
            _ => {}
        }
        self.ltae.init(&mut store, &mut stream(seed, "init.ltae"));
        self.head.init(&mut store, &mut stream(seed, "init.head"));
        store
    }

    /// `[(B·T)×D]` encodings of the batch positions, if the variant adds one.
    pub fn encode_positions(&self, g: &mut Graph, store: &ParamStore, batch: &PixelSetBatch) -> Result<Option<Var>> {
        Ok(match &self.pe {
            None => None,
            Some(PositionalEncoder::Sinusoidal(cfg)) => {
                Some(g.constant(crate::encodings::encode_values(&batch.positions, cfg)?))
            }
            Some(PositionalEncoder::Fourier(f)) => Some(f.forward(g, store, &batch.positions)?),
            Some(PositionalEncoder::Recurrent(r)) => {
                Some(r.forward(g, store, &batch.positions, batch.batch, batch.steps)?)
            }
        })
    }

    /// Logits `[B×K]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &PixelSetBatch, mode: Mode) -> Result<Var> {
        let concat = self.pse.concat.then_some(batch.positions.as_slice());
        let e = self.pse.forward(g, store, batch, concat, mode)?;
        let p = self.encode_positions(g, store, batch)?;
        let f = self.ltae.forward(g, store, e, p, &batch.mask, batch.batch, batch.steps, mode)?;
        self.head.forward(g, store, f)
    }

    /// Evaluation-mode logits.
    pub fn predict(&self, store: &ParamStore, batch: &PixelSetBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, batch, Mode::Eval)?;
        Ok(g.value(out).clone())
    }

    /// Checkpoint of `store` whose header starts with the model config,
    /// followed by `extra` entries.
    pub fn checkpoint(&self, store: &ParamStore, extra: &[(String, String)]) -> Checkpoint {
        let mut header = self.config.header();
        header.extend_from_slice(extra);
        Checkpoint::from_store(header, store)
    }

    /// Rebuilds the model from a checkpoint header and loads its parameters.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, ParamStore)> {
        let model = Self::new(ModelConfig::from_header(ckpt)?)?;
        let mut store = model.init_params(0);
        store.load_records(ckpt.records.clone())?;
        Ok((model, store))
    }
}

/// Lays out and initializes a model; identical seeds give identical parameters.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
    let model = Model::new(config)?;
    let store = model.init_params(seed);
    Ok((model, store))
}
