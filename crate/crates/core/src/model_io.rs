//! Plain-text model files.
//!
//! One `key = value` pair per line; arrays are comma separated and every
//! float is written with 17 significant digits so values survive a round
//! trip exactly. Lines starting with `#` are comments. Rating
//! distributions and their priors are listed value-major
//! (`v` slowest, then item, then component fastest).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cptv::{BetaPrior, CptvParams};
use crate::error::{Error, Result};
use crate::mixture::MixtureParams;
use crate::predict::{fmt_f64, FittedModel};
use crate::synthetic::GroundTruth;

pub const FORMAT_VERSION: u32 = 1;

fn join(xs: impl IntoIterator<Item = f64>) -> String {
    xs.into_iter().map(fmt_f64).collect::<Vec<_>>().join(",")
}

fn value_major(params: &MixtureParams, flat: &[f64]) -> Vec<f64> {
    let (k, nm, nv) = (params.n_components(), params.n_items(), params.n_values());
    let mut out = Vec::with_capacity(flat.len());
    for v in 0..nv {
        for m in 0..nm {
            for z in 0..k {
                out.push(flat[(m * nv + v) * k + z]);
            }
        }
    }
    out
}

fn from_value_major(k: usize, nm: usize, nv: usize, list: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; list.len()];
    let mut i = 0;
    for v in 0..nv {
        for m in 0..nm {
            for z in 0..k {
                out[(m * nv + v) * k + z] = list[i];
                i += 1;
            }
        }
    }
    out
}

fn write_mixture(out: &mut String, model_name: &str, params: &MixtureParams) {
    writeln!(out, "format_version = {FORMAT_VERSION}").unwrap();
    writeln!(out, "model = {model_name}").unwrap();
    writeln!(out, "K = {}", params.n_components()).unwrap();
    writeln!(out, "M = {}", params.n_items()).unwrap();
    writeln!(out, "V = {}", params.n_values()).unwrap();
    writeln!(out, "theta = {}", join(params.theta().iter().copied())).unwrap();
    writeln!(out, "alpha = {}", join(params.alpha().iter().copied())).unwrap();
    writeln!(
        out,
        "beta = {}",
        join(value_major(params, params.beta_flat()))
    )
    .unwrap();
    writeln!(
        out,
        "phi = {}",
        join(value_major(params, params.phi_flat()))
    )
    .unwrap();
}

fn write_cptv(out: &mut String, cptv: &CptvParams) {
    match cptv.prior() {
        None => writeln!(out, "mu_mode = fixed").unwrap(),
        Some(_) => writeln!(out, "mu_mode = learn").unwrap(),
    }
    writeln!(out, "mu = {}", join(cptv.mu().iter().copied())).unwrap();
    if let Some(p) = cptv.prior() {
        writeln!(out, "xi1 = {}", join(p.xi1.iter().copied())).unwrap();
        writeln!(out, "xi0 = {}", join(p.xi0.iter().copied())).unwrap();
    }
}

pub fn model_to_string(model: &FittedModel) -> String {
    let mut out = String::new();
    match model {
        FittedModel::Mar(p) => write_mixture(&mut out, "mm-none", p),
        FittedModel::Nmar { params, cptv } => {
            write_mixture(&mut out, "mm-cptv", params);
            write_cptv(&mut out, cptv);
        }
    }
    out
}

/// Ground-truth manifest: the generating model plus user components,
/// preceded by `# key = value` provenance comments.
pub fn truth_to_string(gt: &GroundTruth, provenance: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in provenance {
        writeln!(out, "# {k} = {v}").unwrap();
    }
    write_mixture(&mut out, "mm-cptv", &gt.params);
    write_cptv(&mut out, &gt.cptv);
    writeln!(out, "n_users = {}", gt.n_users()).unwrap();
    let z: Vec<String> = gt.z.iter().map(|z| z.to_string()).collect();
    writeln!(out, "z = {}", z.join(",")).unwrap();
    out
}

struct Document {
    entries: HashMap<String, (usize, String)>,
}

impl Document {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ModelFormat {
                line: idx + 1,
                msg: "expected 'key = value'".into(),
            })?;
            entries.insert(key.trim().to_string(), (idx + 1, value.trim().to_string()));
        }
        Ok(Self { entries })
    }

    fn raw(&self, key: &str) -> Result<(usize, &str)> {
        self.entries
            .get(key)
            .map(|(l, v)| (*l, v.as_str()))
            .ok_or_else(|| Error::ModelFormat {
                line: 0,
                msg: format!("missing key '{key}'"),
            })
    }

    fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn usize(&self, key: &str) -> Result<usize> {
        let (line, v) = self.raw(key)?;
        v.parse().map_err(|_| Error::ModelFormat {
            line,
            msg: format!("'{key}' is not a non-negative integer"),
        })
    }

    fn floats(&self, key: &str, expected: usize) -> Result<Vec<f64>> {
        let (line, v) = self.raw(key)?;
        let xs: Vec<f64> = if v.is_empty() {
            Vec::new()
        } else {
            v.split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::ModelFormat {
                    line,
                    msg: format!("'{key}' holds a malformed number"),
                })?
        };
        if xs.len() != expected {
            return Err(Error::ModelFormat {
                line,
                msg: format!("'{key}' has {} entries, expected {expected}", xs.len()),
            });
        }
        Ok(xs)
    }
}

pub fn model_from_str(text: &str) -> Result<FittedModel> {
    let doc = Document::parse(text)?;
    let version = doc.usize("format_version")?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::ModelFormat {
            line: doc.raw("format_version")?.0,
            msg: format!("unsupported format version {version}"),
        });
    }
    let (k, nm, nv) = (doc.usize("K")?, doc.usize("M")?, doc.usize("V")?);
    let size = k * nm * nv;
    let params = MixtureParams::from_flat(
        doc.floats("theta", k)?,
        nm,
        nv,
        from_value_major(k, nm, nv, &doc.floats("beta", size)?),
        doc.floats("alpha", k)?,
        from_value_major(k, nm, nv, &doc.floats("phi", size)?),
    )?;
    let (line, model) = doc.raw("model")?;
    match model {
        "mm-none" => Ok(FittedModel::Mar(params)),
        "mm-cptv" => {
            let mu = doc.floats("mu", nv)?;
            let cptv = match doc.raw("mu_mode")?.1 {
                "fixed" => CptvParams::new(mu)?,
                "learn" => {
                    let prior = BetaPrior {
                        xi1: doc.floats("xi1", nv)?,
                        xi0: doc.floats("xi0", nv)?,
                    };
                    CptvParams::with_prior(mu, prior)?
                }
                other => {
                    return Err(Error::ModelFormat {
                        line: doc.raw("mu_mode")?.0,
                        msg: format!("unknown mu_mode '{other}'"),
                    })
                }
            };
            if doc.has("xi1") && cptv.prior().is_none() {
                return Err(Error::ModelFormat {
                    line: doc.raw("xi1")?.0,
                    msg: "fixed mu_mode cannot carry a prior".into(),
                });
            }
            Ok(FittedModel::Nmar { params, cptv })
        }
        other => Err(Error::ModelFormat {
            line,
            msg: format!("unknown model '{other}'"),
        }),
    }
}

pub fn save_model(path: &Path, model: &FittedModel) -> Result<()> {
    fs::write(path, model_to_string(model))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_model(path: &Path) -> Result<FittedModel> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    model_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cptv::build_mu_prior;
    use crate::mixture::init_params;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_exact(seed in any::<u64>(), k in 1usize..4, nm in 1usize..4, learn in any::<bool>()) {
            let params = init_params(k, nm, 5, 2.5, 3.0, seed).unwrap();
            let model = if learn {
                let mu = vec![0.1, 0.2, 0.3, 0.4, 0.5];
                let prior = build_mu_prior(&mu, 40.0).unwrap();
                FittedModel::Nmar { params, cptv: CptvParams::with_prior(mu, prior).unwrap() }
            } else {
                FittedModel::Mar(params)
            };
            let back = model_from_str(&model_to_string(&model)).unwrap();
            prop_assert_eq!(back, model);
        }
    }

    #[test]
    fn missing_key_and_bad_number() {
        let model = FittedModel::Mar(init_params(2, 2, 5, 2.0, 2.0, 1).unwrap());
        let text = model_to_string(&model);
        let without_theta: String = text
            .lines()
            .filter(|l| !l.starts_with("theta"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(matches!(
            model_from_str(&without_theta),
            Err(Error::ModelFormat { .. })
        ));
        let broken = text.replace("K = 2", "K = two");
        assert!(matches!(
            model_from_str(&broken),
            Err(Error::ModelFormat { .. })
        ));
    }

    #[test]
    fn truth_manifest_loads_as_model() {
        use crate::synthetic::{sample_ground_truth, GeneratorConfig};
        let cfg = GeneratorConfig {
            n_users: 5,
            n_items: 3,
            n_components: 2,
            ..GeneratorConfig::default()
        };
        let gt = sample_ground_truth(&cfg, 4).unwrap();
        let text = truth_to_string(&gt, &[("seed", "4".into())]);
        assert!(text.starts_with("# seed = 4\n"));
        match model_from_str(&text).unwrap() {
            FittedModel::Nmar { params, cptv } => {
                assert_eq!(params, gt.params);
                assert_eq!(cptv, gt.cptv);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
