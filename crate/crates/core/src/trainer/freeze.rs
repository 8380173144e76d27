use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Freeze everything except one part of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezePreset {
    AllExceptDecoder,
    AllExceptOutputLayer,
    AllExceptEmbeddings,
    AllExceptFeedForward,
}

impl FreezePreset {
    pub const ALL: [FreezePreset; 4] = [
        FreezePreset::AllExceptDecoder,
        FreezePreset::AllExceptOutputLayer,
        FreezePreset::AllExceptEmbeddings,
        FreezePreset::AllExceptFeedForward,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FreezePreset::AllExceptDecoder => "all_except_decoder",
            FreezePreset::AllExceptOutputLayer => "all_except_output_layer",
            FreezePreset::AllExceptEmbeddings => "all_except_embeddings",
            FreezePreset::AllExceptFeedForward => "all_except_feed_forward",
        }
    }

    /// Whether `name` stays trainable.
    pub fn keeps(self, name: &str) -> bool {
        match self {
            FreezePreset::AllExceptDecoder => name.starts_with("decoder."),
            // the output projection is tied to the target embedding
            FreezePreset::AllExceptOutputLayer => name.starts_with("output.") || name == "target.embed.surface",
            FreezePreset::AllExceptEmbeddings => name.contains(".embed."),
            FreezePreset::AllExceptFeedForward => name.contains(".ffn."),
        }
    }
}

impl FromStr for FreezePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown freeze preset {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FreezeSpec {
    Preset(FreezePreset),
    /// Glob patterns over parameter names (`*` and `?`).
    Patterns(Vec<String>),
}

impl FreezeSpec {
    /// A preset name, or comma-separated glob patterns.
    pub fn parse(s: &str) -> Result<Self> {
        if let Ok(p) = s.parse() {
            return Ok(FreezeSpec::Preset(p));
        }
        let pats: Vec<String> = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::to_string)
            .collect();
        if pats.is_empty() {
            return Err(Error::Config("empty freeze specification".into()));
        }
        Ok(FreezeSpec::Patterns(pats))
    }
}

/// `*` matches any run of characters, `?` exactly one.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let n: Vec<char> = name.chars().collect();
    let (mut i, mut j) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while j < n.len() {
        if i < p.len() && (p[i] == '?' || p[i] == n[j]) {
            i += 1;
            j += 1;
        } else if i < p.len() && p[i] == '*' {
            star = Some((i, j));
            i += 1;
        } else if let Some((si, sj)) = star {
            i = si + 1;
            j = sj + 1;
            star = Some((si, sj + 1));
        } else {
            return false;
        }
    }
    p[i..].iter().all(|&c| c == '*')
}

/// Flags matching parameters frozen and returns patterns that matched
/// nothing (each is also logged as a warning).
pub fn freeze_params(params: &mut ModelParams, spec: &FreezeSpec) -> Vec<String> {
    let names: Vec<String> = params.names().map(str::to_string).collect();
    match spec {
        FreezeSpec::Preset(p) => {
            for n in &names {
                if !p.keeps(n) {
                    params.set_frozen(n, true);
                }
            }
            Vec::new()
        }
        FreezeSpec::Patterns(pats) => {
            let mut unmatched = Vec::new();
            for pat in pats {
                let hits: Vec<&String> = names.iter().filter(|n| glob_match(pat, n)).collect();
                if hits.is_empty() {
                    log::warn!("freeze pattern {pat:?} matches no parameter");
                    unmatched.push(pat.clone());
                }
                for n in hits {
                    params.set_frozen(n, true);
                }
            }
            unmatched
        }
    }
}
