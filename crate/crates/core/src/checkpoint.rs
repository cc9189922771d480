//! Trained models and their binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "UDVDCKPT" | version u32
//! noise model: kind u8 | sigma f64 (NaN when absent)
//! text block: network config (JSON)
//! text block: training config echo
//! text block: free-form metadata
//! network parameters
//! has_sigma_net u8 [| text block: sigma-net config | sigma-net parameters]
//! ```
//!
//! A text block is a `u32` byte length followed by UTF-8. A parameter
//! section is a `u32` kernel count followed by, per kernel, a text block
//! with its name, `out, in, kh, kw` as `u32`, and the `f32` weights.

use std::fs;
use std::path::Path;

use crate::error::{Result, UdvdError};
use crate::loss_fusion::{NoiseKind, NoiseModel};
use crate::network::{BlindSpotNetwork, NetworkConfig, OutputLayout};

const MAGIC: &[u8; 8] = b"UDVDCKPT";
const VERSION: u32 = 1;

/// A denoiser ready for inference, with the noise model it was trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub net: BlindSpotNetwork<f32>,
    /// Noise-level network, present when σ is estimated rather than known.
    pub sigma_net: Option<BlindSpotNetwork<f32>>,
    pub noise: NoiseModel,
    /// Key-value echo of the training configuration.
    pub train_config: String,
    pub metadata: String,
}

impl TrainedModel {
    pub fn new(net: BlindSpotNetwork<f32>, noise: NoiseModel) -> Self {
        Self {
            net,
            sigma_net: None,
            noise,
            train_config: String::new(),
            metadata: String::new(),
        }
    }

    /// Check that the output layout, noise model and σ-net agree.
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        let layout = self.net.config.output;
        match self.noise.kind {
            NoiseKind::Unknown if layout != OutputLayout::MeanOnly => {
                return Err(UdvdError::invalid(
                    "unknown-noise models predict the mean only",
                ))
            }
            NoiseKind::GaussianKnownSigma | NoiseKind::GaussianUnknownSigma
                if layout != OutputLayout::Posterior =>
            {
                return Err(UdvdError::invalid(
                    "Gaussian-noise models predict mean and covariance",
                ))
            }
            _ => {}
        }
        match (&self.sigma_net, self.noise.kind) {
            (None, NoiseKind::GaussianUnknownSigma) => Err(UdvdError::invalid(
                "estimated-sigma model lacks its noise-level network",
            )),
            (Some(_), kind) if kind != NoiseKind::GaussianUnknownSigma => Err(UdvdError::invalid(
                "noise-level network given for a model that does not estimate sigma",
            )),
            (Some(s), _)
                if s.config.output != OutputLayout::NoiseLevel
                    || s.config.frame_count != self.net.config.frame_count
                    || s.config.color != self.net.config.color =>
            {
                Err(UdvdError::invalid(
                    "noise-level network does not match the denoiser's window",
                ))
            }
            _ => Ok(()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| UdvdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| UdvdError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.push(match self.noise.kind {
            NoiseKind::GaussianKnownSigma => 0,
            NoiseKind::GaussianUnknownSigma => 1,
            NoiseKind::Unknown => 2,
        });
        out.extend_from_slice(&self.noise.sigma.unwrap_or(f64::NAN).to_le_bytes());
        put_text(&mut out, &serde_json::to_string(&self.net.config)?);
        put_text(&mut out, &self.train_config);
        put_text(&mut out, &self.metadata);
        put_params(&mut out, &self.net);
        match &self.sigma_net {
            Some(s) => {
                out.push(1);
                put_text(&mut out, &serde_json::to_string(&s.config)?);
                put_params(&mut out, s);
            }
            None => out.push(0),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(UdvdError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(UdvdError::Format(format!("unsupported version {version}")));
        }
        let kind = match r.take(1)?[0] {
            0 => NoiseKind::GaussianKnownSigma,
            1 => NoiseKind::GaussianUnknownSigma,
            2 => NoiseKind::Unknown,
            k => return Err(UdvdError::Format(format!("unknown noise kind {k}"))),
        };
        let sigma = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let noise = NoiseModel {
            kind,
            sigma: (!sigma.is_nan()).then_some(sigma),
        };
        noise
            .validate()
            .map_err(|e| UdvdError::Format(format!("noise model: {e}")))?;
        let config: NetworkConfig = serde_json::from_str(&r.text()?)?;
        let train_config = r.text()?;
        let metadata = r.text()?;
        let net = read_net(&mut r, config)?;
        let sigma_net = match r.take(1)?[0] {
            0 => None,
            1 => {
                let config: NetworkConfig = serde_json::from_str(&r.text()?)?;
                Some(read_net(&mut r, config)?)
            }
            f => return Err(UdvdError::Format(format!("bad sigma-net flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(UdvdError::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let model = Self {
            net,
            sigma_net,
            noise,
            train_config,
            metadata,
        };
        model
            .validate()
            .map_err(|e| UdvdError::Format(e.to_string()))?;
        Ok(model)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_params(out: &mut Vec<u8>, net: &BlindSpotNetwork<f32>) {
    put_u32(out, net.params.len() as u32);
    for (_, name, k) in net.params.iter() {
        put_text(out, name);
        for d in [k.out_channels, k.in_channels, k.kh, k.kw] {
            put_u32(out, d as u32);
        }
        for v in &k.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| UdvdError::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| UdvdError::Format("text block is not UTF-8".into()))
    }
}

fn read_net(r: &mut Reader<'_>, config: NetworkConfig) -> Result<BlindSpotNetwork<f32>> {
    let mut net = BlindSpotNetwork::<f32>::new(config)?;
    let count = r.u32()? as usize;
    if count != net.params.len() {
        return Err(UdvdError::Format(format!(
            "checkpoint has {count} kernels, config implies {}",
            net.params.len()
        )));
    }
    let names: Vec<String> = net.params.iter().map(|(_, n, _)| n.to_string()).collect();
    for (kernel, expected) in net.params.kernels_mut().zip(names) {
        let name = r.text()?;
        if name != expected {
            return Err(UdvdError::Format(format!(
                "kernel `{name}` found where `{expected}` was expected"
            )));
        }
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
        if dims != [kernel.out_channels, kernel.in_channels, kernel.kh, kernel.kw] {
            return Err(UdvdError::Format(format!("kernel `{name}` has dims {dims:?}")));
        }
        let raw = r.take(kernel.data.len() * 4)?;
        for (v, b) in kernel.data.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().unwrap());
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ColorMode, OutputLayout};

    fn model() -> TrainedModel {
        let cfg = NetworkConfig {
            enc_width: 4,
            dec_width: 8,
            d1_out: 4,
            d2_out: 4,
            head_width: 4,
            ..NetworkConfig::desk(5, ColorMode::Rgb)
        };
        let mut m = TrainedModel::new(
            BlindSpotNetwork::new(cfg.clone().with_seed(3)).unwrap(),
            NoiseModel::estimated(),
        );
        m.sigma_net = Some(
            BlindSpotNetwork::new(cfg.with_output(OutputLayout::NoiseLevel).with_seed(4)).unwrap(),
        );
        m.train_config = "epochs = 3\n".into();
        m.metadata = "note = test\n".into();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        m.save(&path).unwrap();
        let back = TrainedModel::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes().unwrap(), m.to_bytes().unwrap());
    }

    #[test]
    fn known_sigma_round_trip() {
        let mut m = model();
        m.noise = NoiseModel::known(25.0).unwrap();
        assert!(m.to_bytes().is_err());
        m.sigma_net = None;
        assert_eq!(TrainedModel::from_bytes(&m.to_bytes().unwrap()).unwrap(), m);
    }

    #[test]
    fn corruption_rejected() {
        let bytes = model().to_bytes().unwrap();
        assert!(TrainedModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TrainedModel::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(TrainedModel::from_bytes(&extra).is_err());
    }
}
