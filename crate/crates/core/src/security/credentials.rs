//! Server-side credential vault and output redaction.
//!
//! File format, one entry per line:
//!
//! ```text
//! # comment
//! alpha.key = abc123
//! ```
//!
//! `QUANTMCP_CRED_<ID>` environment variables override file entries, where
//! `<ID>` is the provider id upper-cased with non-alphanumerics mapped to `_`.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde_json::Value;
use thiserror::Error;

pub const REDACTED: &str = "***REDACTED***";
pub const ENV_PREFIX: &str = "QUANTMCP_CRED_";

/// A secret string. It has no `Serialize` impl and its `Debug` output is masked.
#[derive(Clone, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(REDACTED)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CredentialSource {
    File,
    Environment,
}

#[derive(Debug, Error)]
pub enum CredentialError {
    #[error("credentials file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("credentials file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("credentials file {path} is readable by other users")]
    WorldReadable { path: String },
}

/// What to do when the credentials file is world-readable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PermissionPolicy {
    #[default]
    Warn,
    Fail,
}

#[derive(Default, Clone)]
pub struct CredentialStore {
    secrets: BTreeMap<String, (Secret, CredentialSource)>,
    // Longest first, so a secret that contains another is replaced whole.
    patterns: Vec<String>,
}

/// The loaded store plus any startup warnings (already free of secret text).
#[derive(Debug)]
pub struct LoadedCredentials {
    pub store: CredentialStore,
    pub warnings: Vec<String>,
}

pub fn env_var_name(provider_id: &str) -> String {
    let suffix: String = provider_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect();
    format!("{ENV_PREFIX}{suffix}")
}

/// Parses the flat `provider.key = value` format.
pub fn parse_credentials_file(text: &str) -> Result<Vec<(String, String)>, CredentialError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: &str| CredentialError::Malformed {
            line: line_no,
            reason: reason.to_owned(),
        };
        let (lhs, rhs) = line.split_once('=').ok_or_else(|| malformed("expected `provider.key = value`"))?;
        let lhs = lhs.trim();
        let value = rhs.trim();
        let provider = lhs
            .strip_suffix(".key")
            .ok_or_else(|| malformed("left-hand side must end in `.key`"))?;
        if provider.is_empty() || provider.chars().any(char::is_whitespace) {
            return Err(malformed("provider id must be non-empty and contain no whitespace"));
        }
        if value.is_empty() {
            return Err(malformed("empty secret value"));
        }
        out.push((provider.to_owned(), value.to_owned()));
    }
    Ok(out)
}

/// Loads secrets from an optional file and the environment.
///
/// `known_ids` are the credential references the configuration mentions;
/// their env vars are looked up by exact name. Any other `QUANTMCP_CRED_*`
/// variable is stored under its lower-cased suffix so it is still redacted.
pub fn load_credentials<I, K, V>(
    path: Option<&Path>,
    env: I,
    known_ids: &[&str],
    policy: PermissionPolicy,
) -> Result<LoadedCredentials, CredentialError>
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<String>,
{
    let mut warnings = Vec::new();
    let mut secrets = BTreeMap::new();

    if let Some(path) = path.filter(|p| p.exists()) {
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| CredentialError::Io {
            path: shown.clone(),
            source,
        })?;
        if is_world_readable(path) {
            match policy {
                PermissionPolicy::Warn => warnings.push(format!("credentials file {shown} is readable by other users")),
                PermissionPolicy::Fail => return Err(CredentialError::WorldReadable { path: shown }),
            }
        }
        for (provider, value) in parse_credentials_file(&text)? {
            secrets.insert(provider, (Secret(value), CredentialSource::File));
        }
    }

    let env: BTreeMap<String, String> = env
        .into_iter()
        .map(|(k, v)| (k.into(), v.into()))
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    let mut claimed = Vec::new();
    for id in known_ids {
        let name = env_var_name(id);
        if let Some(value) = env.get(&name).filter(|v| !v.is_empty()) {
            secrets.insert((*id).to_owned(), (Secret(value.clone()), CredentialSource::Environment));
            claimed.push(name);
        }
    }
    for (name, value) in &env {
        if claimed.contains(name) || value.is_empty() {
            continue;
        }
        let id = name[ENV_PREFIX.len()..].to_ascii_lowercase();
        secrets
            .entry(id)
            .or_insert_with(|| (Secret(value.clone()), CredentialSource::Environment));
    }

    Ok(LoadedCredentials {
        store: CredentialStore::from_map(secrets),
        warnings,
    })
}

#[cfg(unix)]
fn is_world_readable(path: &Path) -> bool {
    use std::os::unix::fs::PermissionsExt;
    std::fs::metadata(path)
        .map(|m| m.permissions().mode() & 0o004 != 0)
        .unwrap_or(false)
}

#[cfg(not(unix))]
fn is_world_readable(_path: &Path) -> bool {
    false
}

impl fmt::Debug for CredentialStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map()
            .entries(self.secrets.iter().map(|(k, (_, src))| (k, src)))
            .finish()
    }
}

impl CredentialStore {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Store populated directly; used by tests and embedders.
    pub fn from_pairs<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        Self::from_map(
            pairs
                .into_iter()
                .map(|(k, v)| (k.into(), (Secret(v.into()), CredentialSource::File)))
                .collect(),
        )
    }

    fn from_map(secrets: BTreeMap<String, (Secret, CredentialSource)>) -> Self {
        let mut patterns: Vec<String> = secrets
            .values()
            .map(|(s, _)| s.0.clone())
            .filter(|s| !s.is_empty())
            .collect();
        patterns.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        patterns.dedup();
        Self { secrets, patterns }
    }

    /// The only way provider code reads a secret.
    pub fn resolve(&self, reference: &str) -> Option<&Secret> {
        self.secrets.get(reference).map(|(s, _)| s)
    }

    pub fn source(&self, reference: &str) -> Option<CredentialSource> {
        self.secrets.get(reference).map(|(_, src)| *src)
    }

    pub fn len(&self) -> usize {
        self.secrets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.secrets.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.secrets.keys().map(String::as_str)
    }

    pub fn redact_str<'a>(&self, text: &'a str) -> Cow<'a, str> {
        let mut out = Cow::Borrowed(text);
        for secret in &self.patterns {
            if out.contains(secret.as_str()) {
                out = Cow::Owned(out.replace(secret.as_str(), REDACTED));
            }
        }
        out
    }

    /// Redacts every string and object key inside `value`.
    pub fn redact_value(&self, value: &mut Value) {
        if self.patterns.is_empty() {
            return;
        }
        match value {
            Value::String(s) => {
                if let Cow::Owned(r) = self.redact_str(s) {
                    *s = r;
                }
            }
            Value::Array(items) => items.iter_mut().for_each(|v| self.redact_value(v)),
            Value::Object(map) => {
                let needs_key_rewrite = map.keys().any(|k| matches!(self.redact_str(k), Cow::Owned(_)));
                if needs_key_rewrite {
                    let old = std::mem::take(map);
                    for (k, v) in old {
                        map.insert(self.redact_str(&k).into_owned(), v);
                    }
                }
                map.values_mut().for_each(|v| self.redact_value(v));
            }
            _ => {}
        }
    }

    pub fn redacted(&self, value: &Value) -> Value {
        let mut v = value.clone();
        self.redact_value(&mut v);
        v
    }
}
