use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use instrec_core::backend::{HttpBackend, MockBackend, MockScript, ModelBackend};
use instrec_core::templates::{RetrievalConfig, TemplateLibrary};
use instrec_core::{build_trie, build_vocabulary, Engine, HashedBagOfWords, InstructionLibrary, Vocabulary};

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Mock {
        script: PathBuf,
    },
    Http {
        endpoint: String,
        #[serde(default)]
        timeout_secs: Option<u64>,
    },
}

/// Run configuration. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_novelty_delta")]
    pub novelty_delta: f64,
    pub backend: BackendConfig,
    pub instructions: PathBuf,
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub vocabulary: Option<PathBuf>,
    #[serde(default)]
    pub distillation_log: Option<PathBuf>,
}

fn default_delta() -> f64 {
    instrec_core::templates::DEFAULT_DELTA
}

fn default_novelty_delta() -> f64 {
    instrec_core::templates::DEFAULT_NOVELTY_DELTA
}

pub fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read(path)?).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn load_instructions(path: &Path) -> Result<InstructionLibrary, CliError> {
    InstructionLibrary::from_json(&read(path)?).map_err(|e| CliError::Invariant(format!("{}: {e}", path.display())))
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg: Config = parse_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.instructions);
        for p in [&mut cfg.templates, &mut cfg.vocabulary, &mut cfg.distillation_log]
            .into_iter()
            .flatten()
        {
            resolve(p);
        }
        if let BackendConfig::Mock { script } = &mut cfg.backend {
            resolve(script);
        }
        Ok(cfg)
    }

    pub fn retrieval(&self) -> Result<RetrievalConfig, CliError> {
        RetrievalConfig::new(self.delta, self.novelty_delta).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn vocabulary(&self, library: &InstructionLibrary) -> Result<Vocabulary, CliError> {
        match &self.vocabulary {
            Some(p) => Vocabulary::from_json(&read(p)?).map_err(|e| CliError::Invariant(format!("{}: {e}", p.display()))),
            None => build_vocabulary(&library.surfaces()).map_err(|e| CliError::Invariant(e.to_string())),
        }
    }

    pub fn templates(&self) -> Result<TemplateLibrary, CliError> {
        let embedder = Arc::new(HashedBagOfWords::default());
        match &self.templates {
            Some(p) if p.exists() => TemplateLibrary::from_json(embedder, &read(p)?)
                .map_err(|e| CliError::Invariant(format!("{}: {e}", p.display()))),
            _ => Ok(TemplateLibrary::new(embedder)),
        }
    }

    pub fn backend(&self, vocab_size: usize) -> Result<Arc<dyn ModelBackend>, CliError> {
        Ok(match &self.backend {
            BackendConfig::Mock { script } => {
                let s = MockScript::from_json(&read(script)?)
                    .map_err(|e| CliError::Io(format!("{}: {e}", script.display())))?;
                s.validate(vocab_size)
                    .map_err(|e| CliError::Invariant(format!("{}: {e}", script.display())))?;
                Arc::new(MockBackend::new(s))
            }
            BackendConfig::Http { endpoint, timeout_secs } => match timeout_secs {
                Some(t) => Arc::new(HttpBackend::with_timeout(endpoint, Duration::from_secs(*t))),
                None => Arc::new(HttpBackend::new(endpoint)),
            },
        })
    }

    pub fn engine(&self) -> Result<Engine, CliError> {
        let library = load_instructions(&self.instructions)?;
        let vocab = self.vocabulary(&library)?;
        let trie = build_trie(&library, &vocab).map_err(|e| CliError::Invariant(e.to_string()))?;
        let backend = self.backend(trie.vocab_size())?;
        Ok(Engine::new(backend, Arc::new(vocab), trie, self.templates()?))
    }
}
