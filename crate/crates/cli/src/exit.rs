//! Maps failures onto process exit codes.

use std::error::Error as StdError;
use std::fmt;

use finsep::audio::AudioError;
use finsep::bsseval::BssError;
use finsep::mixgen::MixError;
use finsep::train::TrainError;
use finsep::ModelError;

pub const SUCCESS: u8 = 0;
pub const COMPUTE: u8 = 1;
pub const USAGE: u8 = 2;

/// Bad flags, bad configuration or unusable input files.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl StdError for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

macro_rules! bail_usage {
    ($($t:tt)*) => {
        return Err($crate::exit::usage(format!($($t)*)))
    };
}
pub(crate) use bail_usage;

fn audio(e: &AudioError) -> bool {
    matches!(
        e,
        AudioError::UnsupportedFormat(_) | AudioError::CorruptContainer(_) | AudioError::Io { .. }
    )
}

fn mix(e: &MixError) -> bool {
    match e {
        MixError::Manifest { .. } | MixError::Index(_) | MixError::Io { .. } => true,
        MixError::Audio(a) => audio(a),
        _ => false,
    }
}

fn numcore(e: &finsep_numcore::Error) -> bool {
    use finsep_numcore::Error as E;
    matches!(e, E::Checkpoint(_) | E::Io(_) | E::UnknownParam(_))
}

fn model(e: &ModelError) -> bool {
    match e {
        ModelError::UnknownArch(_) | ModelError::InvalidConfig(_) => true,
        ModelError::Numcore(n) => numcore(n),
        ModelError::Audio(a) => audio(a),
        ModelError::NonFinite => false,
    }
}

fn train(e: &TrainError) -> bool {
    match e {
        TrainError::Checkpoint(_) | TrainError::Io { .. } | TrainError::InvalidConfig(_) => true,
        TrainError::Model(m) => model(m),
        TrainError::Data(d) => mix(d),
        _ => false,
    }
}

fn is_usage(e: &(dyn StdError + 'static)) -> bool {
    if e.is::<UsageError>() || e.is::<std::io::Error>() {
        return true;
    }
    if let Some(x) = e.downcast_ref::<AudioError>() {
        return audio(x);
    }
    if let Some(x) = e.downcast_ref::<MixError>() {
        return mix(x);
    }
    if let Some(x) = e.downcast_ref::<finsep_numcore::Error>() {
        return numcore(x);
    }
    if let Some(x) = e.downcast_ref::<ModelError>() {
        return model(x);
    }
    if let Some(x) = e.downcast_ref::<TrainError>() {
        return train(x);
    }
    if let Some(x) = e.downcast_ref::<BssError>() {
        return matches!(x, BssError::Csv(_));
    }
    false
}

pub fn code_for(err: &anyhow::Error) -> u8 {
    if err.chain().any(is_usage) {
        USAGE
    } else {
        COMPUTE
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn classification() {
        let missing = AudioError::Io {
            path: "x.wav".into(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "gone"),
        };
        assert_eq!(code_for(&anyhow::Error::new(missing)), USAGE);
        assert_eq!(
            code_for(&anyhow::Error::new(AudioError::SilentSignal)),
            COMPUTE
        );
        let nested = TrainError::Model(ModelError::Numcore(finsep_numcore::Error::Checkpoint(
            "bad".into(),
        )));
        assert_eq!(code_for(&anyhow::Error::new(nested)), USAGE);
        let nonfinite = TrainError::NonFiniteLoss {
            step: 3,
            keys: vec![],
        };
        assert_eq!(code_for(&anyhow::Error::new(nonfinite)), COMPUTE);
        let wrapped: anyhow::Result<()> = Err(usage("bad flag"));
        assert_eq!(
            code_for(&wrapped.context("while parsing").unwrap_err()),
            USAGE
        );
        assert_eq!(
            code_for(&anyhow::Error::new(MixError::EmptyPool("fish"))),
            COMPUTE
        );
    }
}
