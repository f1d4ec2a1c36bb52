use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::embed::EmbeddingProvider;
use super::endpoint::{
    generate_via_endpoint, Generated, GeneratorEndpointConfig, Substitution, Transport,
};
use super::select::SimilarityIndex;
use super::set::{fallback_safe_response, NormalEntry, NormalSet};
use super::{NormalError, QARecord};

pub const DEFAULT_M: usize = 3;
pub const DEFAULT_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalMode {
    Similarity,
    Endpoint,
    FallbackOnly,
}

impl fmt::Display for NormalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Similarity => "similarity",
            Self::Endpoint => "endpoint",
            Self::FallbackOnly => "fallback-only",
        })
    }
}

impl FromStr for NormalMode {
    type Err = NormalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "similarity" => Ok(Self::Similarity),
            "endpoint" => Ok(Self::Endpoint),
            "fallback-only" => Ok(Self::FallbackOnly),
            other => Err(NormalError::InvalidConfig(format!(
                "unknown normal-set mode '{other}'"
            ))),
        }
    }
}

/// Where companions come from.
pub enum NormalSource<'a> {
    Similarity {
        retain: &'a [QARecord],
        provider: &'a dyn EmbeddingProvider,
        threshold: f64,
    },
    Endpoint {
        config: &'a GeneratorEndpointConfig,
        transport: &'a dyn Transport,
    },
    FallbackOnly,
}

impl NormalSource<'_> {
    pub fn mode(&self) -> NormalMode {
        match self {
            Self::Similarity { .. } => NormalMode::Similarity,
            Self::Endpoint { .. } => NormalMode::Endpoint,
            Self::FallbackOnly => NormalMode::FallbackOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalBuild {
    pub set: NormalSet,
    pub substitutions: Vec<Substitution>,
}

/// Runs `f` over `items` on at most `cap` threads, keeping input order.
pub(crate) fn bounded_map<T: Sync, R: Send>(
    items: &[T],
    cap: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..cap.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

pub fn build_normal_set(
    forget: &[QARecord],
    m: usize,
    source: &NormalSource<'_>,
) -> Result<NormalBuild, NormalError> {
    super::validate_corpus(forget)?;
    let mut substitutions = Vec::new();
    let entries: Vec<NormalEntry> = match source {
        NormalSource::Similarity {
            retain,
            provider,
            threshold,
        } => {
            if m == 0 {
                return Err(NormalError::InvalidConfig("M must be at least 1".into()));
            }
            let index = SimilarityIndex::build(retain, *provider)?;
            forget
                .iter()
                .map(|f| {
                    Ok(NormalEntry {
                        forget_id: f.id.clone(),
                        companions: index.select(f, m, *threshold, true)?,
                    })
                })
                .collect::<Result<_, NormalError>>()?
        }
        NormalSource::FallbackOnly => forget
            .iter()
            .map(|f| NormalEntry {
                forget_id: f.id.clone(),
                companions: (0..m).map(|i| fallback_safe_response(f, i)).collect(),
            })
            .collect(),
        NormalSource::Endpoint { config, transport } => {
            config.validate()?;
            config.credential()?;
            let results: Vec<Result<Generated, NormalError>> =
                bounded_map(forget, config.max_in_flight, |f| {
                    generate_via_endpoint(f, m, config, *transport)
                });
            let mut entries = Vec::with_capacity(forget.len());
            for (f, r) in forget.iter().zip(results) {
                let g = r?;
                substitutions.extend(g.substitutions);
                entries.push(NormalEntry {
                    forget_id: f.id.clone(),
                    companions: g.companions,
                });
            }
            entries
        }
    };
    Ok(NormalBuild {
        set: NormalSet::new(entries)?,
        substitutions,
    })
}
