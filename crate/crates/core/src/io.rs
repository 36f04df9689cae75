//! On-disk formats. Every file starts with a versioned header; writes go
//! through a temporary file that is renamed into place.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::expert::{DemoDataset, DemoEpisode};
use crate::geometry::Environment;
use crate::nn::Adam;
use crate::replay::Transition;
use crate::sac::{Sac, SacConfig};
use crate::sim::{EpisodeTrace, Metrics};
use crate::train::CurveRow;

pub const VERSION: u32 = 1;
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
const CHECKPOINT_MAGIC: &[u8; 4] = b"SNCK";

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: expected format `{expected}`, found `{found}`")]
    Format { path: String, expected: String, found: String },
    #[error("{path}: unsupported version {found} (this build reads {VERSION})")]
    Version { path: String, found: u32 },
    #[error("{0}: truncated or malformed file")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
}

impl Header {
    pub fn new(format: &str, config_hash: &str, seed: u64) -> Self {
        Header {
            format: format.into(),
            version: VERSION,
            config_hash: config_hash.into(),
            seed,
            code_version: CODE_VERSION.into(),
        }
    }

    fn check(&self, path: &Path, expected: &str) -> Result<(), IoError> {
        if self.format != expected {
            return Err(IoError::Format {
                path: path.display().to_string(),
                expected: expected.into(),
                found: self.format.clone(),
            });
        }
        if self.version != VERSION {
            return Err(IoError::Version {
                path: path.display().to_string(),
                found: self.version,
            });
        }
        Ok(())
    }
}

/// Writes `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn jsonl_line<T: Serialize>(out: &mut Vec<u8>, v: &T) -> Result<(), IoError> {
    serde_json::to_writer(&mut *out, v)?;
    out.push(b'\n');
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EnvFile {
    header: Header,
    environments: Vec<Environment>,
}

pub fn write_environments(path: &Path, header: &Header, envs: &[Environment]) -> Result<(), IoError> {
    let file = EnvFile {
        header: header.clone(),
        environments: envs.to_vec(),
    };
    let mut bytes = serde_json::to_vec_pretty(&file)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_environments(path: &Path) -> Result<(Header, Vec<Environment>), IoError> {
    let file: EnvFile = serde_json::from_slice(&fs::read(path)?)?;
    file.header.check(path, "stepnav-envs")?;
    Ok((file.header, file.environments))
}

#[derive(Serialize, Deserialize)]
struct DemoHeader {
    header: Header,
    source: String,
    env_ids: Vec<u64>,
    transitions: usize,
    episodes: Vec<DemoEpisode>,
}

/// Header line, then one transition per line.
pub fn write_demos(path: &Path, header: &Header, data: &DemoDataset) -> Result<(), IoError> {
    let mut out = Vec::new();
    jsonl_line(
        &mut out,
        &DemoHeader {
            header: header.clone(),
            source: data.source.clone(),
            env_ids: data.env_ids.clone(),
            transitions: data.transitions.len(),
            episodes: data.episodes.clone(),
        },
    )?;
    for t in &data.transitions {
        jsonl_line(&mut out, t)?;
    }
    write_atomic(path, &out)
}

pub fn read_demos(path: &Path) -> Result<(Header, DemoDataset), IoError> {
    let mut lines = BufReader::new(fs::File::open(path)?).lines();
    let first = lines.next().ok_or_else(|| IoError::Malformed(path.display().to_string()))??;
    let head: DemoHeader = serde_json::from_str(&first)?;
    head.header.check(path, "stepnav-demos")?;
    let mut transitions = Vec::with_capacity(head.transitions);
    for line in lines {
        let line = line?;
        if !line.is_empty() {
            transitions.push(serde_json::from_str::<Transition>(&line)?);
        }
    }
    if transitions.len() != head.transitions {
        return Err(IoError::Malformed(path.display().to_string()));
    }
    let seed = head.header.seed;
    Ok((
        head.header,
        DemoDataset {
            source: head.source,
            seed,
            env_ids: head.env_ids,
            episodes: head.episodes,
            transitions,
        },
    ))
}

#[derive(Serialize, Deserialize)]
struct Footer {
    footer: FooterBody,
}

#[derive(Serialize, Deserialize)]
struct FooterBody {
    traces: usize,
}

/// Header line, one episode per line, then a footer with the count.
pub fn write_traces(path: &Path, header: &Header, traces: &[EpisodeTrace]) -> Result<(), IoError> {
    let mut out = Vec::new();
    jsonl_line(&mut out, header)?;
    for t in traces {
        jsonl_line(&mut out, t)?;
    }
    jsonl_line(
        &mut out,
        &Footer {
            footer: FooterBody { traces: traces.len() },
        },
    )?;
    write_atomic(path, &out)
}

pub fn read_traces(path: &Path) -> Result<(Header, Vec<EpisodeTrace>), IoError> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
    let malformed = || IoError::Malformed(path.display().to_string());
    let (first, rest) = lines.split_first().ok_or_else(malformed)?;
    let header: Header = serde_json::from_str(first)?;
    header.check(path, "stepnav-traces")?;
    let (last, body) = rest.split_last().ok_or_else(malformed)?;
    let footer: Footer = serde_json::from_str(last)?;
    let traces = body.iter().map(|l| serde_json::from_str(l)).collect::<Result<Vec<EpisodeTrace>, _>>()?;
    if traces.len() != footer.footer.traces {
        return Err(malformed());
    }
    Ok((header, traces))
}

fn comment_header(header: &Header) -> String {
    format!(
        "# format={} version={} config_hash={} seed={} code_version={}\n",
        header.format, header.version, header.config_hash, header.seed, header.code_version
    )
}

fn parse_comment_header(path: &Path, line: &str) -> Result<Header, IoError> {
    let malformed = || IoError::Malformed(path.display().to_string());
    let body = line.strip_prefix("# ").ok_or_else(malformed)?;
    let field = |name: &str| {
        body.split_whitespace()
            .find_map(|kv| kv.strip_prefix(name).and_then(|r| r.strip_prefix('=')))
            .map(str::to_string)
            .ok_or_else(malformed)
    };
    Ok(Header {
        format: field("format")?,
        version: field("version")?.parse().map_err(|_| malformed())?,
        config_hash: field("config_hash")?,
        seed: field("seed")?.parse().map_err(|_| malformed())?,
        code_version: field("code_version")?,
    })
}

fn write_csv<T: Serialize>(path: &Path, header: &Header, rows: &[T]) -> Result<(), IoError> {
    let mut out = comment_header(header).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    write_atomic(path, &out)
}

fn read_csv<T: DeserializeOwned>(path: &Path, format: &str) -> Result<(Header, Vec<T>), IoError> {
    let text = fs::read_to_string(path)?;
    let first = text.lines().next().unwrap_or("");
    let header = parse_comment_header(path, first)?;
    header.check(path, format)?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let rows = r.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok((header, rows))
}

pub fn write_curves(path: &Path, header: &Header, rows: &[CurveRow]) -> Result<(), IoError> {
    write_csv(path, header, rows)
}

pub fn read_curves(path: &Path) -> Result<(Header, Vec<CurveRow>), IoError> {
    read_csv(path, "stepnav-curves")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub success_mean: f64,
    pub success_std: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub time_ratio: Option<f64>,
}

impl From<&Metrics> for MetricsRow {
    fn from(m: &Metrics) -> Self {
        MetricsRow {
            method: m.method.clone(),
            success_mean: m.success_mean,
            success_std: m.success_std,
            reward_mean: m.reward_mean,
            reward_std: m.reward_std,
            time_ratio: m.time_ratio,
        }
    }
}

pub fn write_metrics(path: &Path, header: &Header, rows: &[MetricsRow]) -> Result<(), IoError> {
    write_csv(path, header, rows)
}

pub fn read_metrics(path: &Path) -> Result<(Header, Vec<MetricsRow>), IoError> {
    read_csv(path, "stepnav-metrics")
}

/// Learner state as stored in a checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    /// Episodes trained so far.
    pub episode: u64,
    pub sac: Sac,
}

struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn floats(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }
    fn adam(&mut self, a: &Adam) {
        for x in [a.lr, a.beta1, a.beta2, a.eps] {
            self.f64(x);
        }
        self.u64(a.t);
        self.floats(&a.m);
        self.floats(&a.v);
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn bytes(&mut self) -> Option<&[u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
    fn floats(&mut self, expect: usize) -> Option<Vec<f64>> {
        let n = self.u64()? as usize;
        if n != expect {
            return None;
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn adam(&mut self, n: usize) -> Option<Adam> {
        let (lr, beta1, beta2, eps) = (self.f64()?, self.f64()?, self.f64()?, self.f64()?);
        let t = self.u64()?;
        Some(Adam {
            lr,
            beta1,
            beta2,
            eps,
            t,
            m: self.floats(n)?,
            v: self.floats(n)?,
        })
    }
}

/// `SNCK`, version, header JSON, learner config JSON, then raw
/// little-endian parameters, optimizer moments and the noise stream
/// position.
pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>, IoError> {
    let mut w = ByteWriter(CHECKPOINT_MAGIC.to_vec());
    w.u32(VERSION);
    w.bytes(&serde_json::to_vec(&ck.header)?);
    w.bytes(&serde_json::to_vec(&ck.sac.config)?);
    w.u64(ck.episode);
    w.u64(ck.sac.updates);
    w.f64(ck.sac.log_alpha);
    w.floats(&ck.sac.actor.params);
    for c in &ck.sac.critics {
        w.floats(&c.params);
    }
    for t in &ck.sac.targets {
        w.floats(&t.params);
    }
    w.adam(&ck.sac.actor_opt);
    for a in &ck.sac.critic_opts {
        w.adam(a);
    }
    w.adam(&ck.sac.alpha_opt);
    w.0.extend_from_slice(&ck.sac.rng.get_seed());
    w.0.extend_from_slice(&ck.sac.rng.get_word_pos().to_le_bytes());
    w.u64(ck.sac.rng.get_stream());
    Ok(w.0)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint, IoError> {
    let name = path.display().to_string();
    let malformed = || IoError::Malformed(name.clone());
    if bytes.get(..4) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(IoError::Format {
            path: name.clone(),
            expected: "SNCK".into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    let mut r = ByteReader { buf: bytes, pos: 4 };
    let version = r.u32().ok_or_else(malformed)?;
    if version != VERSION {
        return Err(IoError::Version { path: name, found: version });
    }
    let header: Header = serde_json::from_slice(r.bytes().ok_or_else(malformed)?)?;
    let config: SacConfig = serde_json::from_slice(r.bytes().ok_or_else(malformed)?)?;
    // shapes come from the config; a fresh learner supplies the layout
    let mut sac = Sac::new(config, 0);
    let mut body = || -> Option<u64> {
        let episode = r.u64()?;
        sac.updates = r.u64()?;
        sac.log_alpha = r.f64()?;
        sac.actor.params = r.floats(sac.actor.params.len())?;
        for c in sac.critics.iter_mut().chain(sac.targets.iter_mut()) {
            c.params = r.floats(c.params.len())?;
        }
        sac.actor_opt = r.adam(sac.actor.params.len())?;
        for (a, c) in sac.critic_opts.iter_mut().zip(&sac.critics) {
            *a = r.adam(c.params.len())?;
        }
        sac.alpha_opt = r.adam(1)?;
        let seed: [u8; 32] = r.take(32)?.try_into().ok()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().ok()?);
        let stream = r.u64()?;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        sac.rng = rng;
        (r.pos == r.buf.len()).then_some(episode)
    };
    let episode = body().ok_or_else(malformed)?;
    Ok(Checkpoint { header, episode, sac })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), IoError> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let ck = decode_checkpoint(path, &fs::read(path)?)?;
    ck.header.check(path, "stepnav-checkpoint")?;
    Ok(ck)
}
