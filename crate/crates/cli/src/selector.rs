use std::fmt;
use std::str::FromStr;

/// Which language model to probe.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendSelector {
    NGram {
        order: usize,
        alpha: f64,
    },
    /// Trigger and target are token strings of the fitted vocabulary.
    Trigger {
        trigger: String,
        target: String,
        horizon: usize,
        p_hi: f64,
        p_lo: f64,
    },
    Http {
        url: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectorError(String);

impl fmt::Display for SelectorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}; expected ngram:<order>:<alpha>, trigger:<trigger>:<target>:<horizon>:<p_hi>:<p_lo> or http:<url>",
            self.0
        )
    }
}

impl std::error::Error for SelectorError {}

fn num<T: FromStr>(field: &str, s: &str) -> Result<T, SelectorError> {
    s.parse().map_err(|_| SelectorError(format!("bad {field} {s:?}")))
}

impl FromStr for BackendSelector {
    type Err = SelectorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| SelectorError(format!("no backend kind in {s:?}")))?;
        match kind {
            "ngram" => match rest.split(':').collect::<Vec<_>>()[..] {
                [order, alpha] => Ok(Self::NGram {
                    order: num("order", order)?,
                    alpha: num("alpha", alpha)?,
                }),
                _ => Err(SelectorError(format!("bad n-gram selector {s:?}"))),
            },
            "trigger" => match rest.split(':').collect::<Vec<_>>()[..] {
                [trigger, target, horizon, p_hi, p_lo] => Ok(Self::Trigger {
                    trigger: trigger.to_string(),
                    target: target.to_string(),
                    horizon: num("horizon", horizon)?,
                    p_hi: num("p_hi", p_hi)?,
                    p_lo: num("p_lo", p_lo)?,
                }),
                _ => Err(SelectorError(format!("bad trigger selector {s:?}"))),
            },
            // a bare URL is accepted as its own selector
            "http" | "https" if rest.starts_with("//") => Ok(Self::Http { url: s.to_string() }),
            "http" if !rest.is_empty() => Ok(Self::Http { url: rest.to_string() }),
            _ => Err(SelectorError(format!("unknown backend {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_kinds() {
        assert_eq!(
            "ngram:2:1.0".parse::<BackendSelector>().unwrap(),
            BackendSelector::NGram { order: 2, alpha: 1.0 }
        );
        assert_eq!(
            "http://localhost:8000".parse::<BackendSelector>().unwrap(),
            BackendSelector::Http {
                url: "http://localhost:8000".into()
            }
        );
        assert_eq!(
            "http:http://h:1/x".parse::<BackendSelector>().unwrap(),
            BackendSelector::Http {
                url: "http://h:1/x".into()
            }
        );
        match "trigger:key:door:50:0.6:0.05".parse::<BackendSelector>().unwrap() {
            BackendSelector::Trigger { trigger, horizon, .. } => assert_eq!((trigger.as_str(), horizon), ("key", 50)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_garbage() {
        for s in ["ngram:2", "ngram:x:1", "bigram:2:1", "trigger:a:b:1", "http:", "ngram"] {
            assert!(s.parse::<BackendSelector>().is_err(), "{s}");
        }
    }
}
