//! Name-pattern selection of refinable layers.
//!
//! A tensor is selected iff it matches at least one include pattern, matches
//! no exclude pattern, and (by default) is exactly 2-D. Patterns are shell
//! style: `*` matches any run of characters, `?` a single character.

/// Include/exclude patterns defining which tensors count as refinable
/// linear layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSelection {
    pub include_patterns: Vec<String>,
    pub exclude_patterns: Vec<String>,
    pub require_2d: bool,
}

/// Block linear-layer tensors in common transformer naming schemes.
const DEFAULT_INCLUDE: &[&str] = &["*proj*", "*gate*", "*up*", "*down*", "*qkv*", "*fc*"];

/// Biases, normalization weights, embeddings and the output head stay
/// untouched by default.
const DEFAULT_EXCLUDE: &[&str] = &["*.bias", "*norm*", "*embed*", "*lm_head*"];

impl Default for LayerSelection {
    fn default() -> Self {
        LayerSelection {
            include_patterns: DEFAULT_INCLUDE.iter().map(|s| s.to_string()).collect(),
            exclude_patterns: DEFAULT_EXCLUDE.iter().map(|s| s.to_string()).collect(),
            require_2d: true,
        }
    }
}

impl LayerSelection {
    /// Select every 2-D tensor.
    pub fn all() -> Self {
        LayerSelection {
            include_patterns: vec!["*".into()],
            exclude_patterns: vec![],
            require_2d: true,
        }
    }

    pub fn selects(&self, name: &str, shape: &[usize]) -> bool {
        if self.require_2d && shape.len() != 2 {
            return false;
        }
        if !self.include_patterns.iter().any(|p| wildcard_match(p, name)) {
            return false;
        }
        !self.exclude_patterns.iter().any(|p| wildcard_match(p, name))
    }
}

/// Iterative glob matcher with backtracking over the most recent `*`.
pub fn wildcard_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0usize, 0usize);
    let mut star: Option<usize> = None;
    let mut mark = 0usize;
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some(pi);
            mark = ti;
            pi += 1;
        } else if let Some(s) = star {
            pi = s + 1;
            mark += 1;
            ti = mark;
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == '*' {
        pi += 1;
    }
    pi == p.len()
}
