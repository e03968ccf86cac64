use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TWO_IE: &str = include_str!("../../topologies/two_ie.toml");
const THREE_IE: &str = include_str!("../../topologies/three_ie.toml");
const FIVE_IE: &str = include_str!("../../topologies/five_ie.toml");

pub const BUILTIN_NAMES: [&str; 3] = ["twoIE", "threeIE", "fiveIE"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: String,
    /// Flow units per step.
    pub capacity: f64,
}

/// One ingress-egress pair; each path is a list of link indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IePair {
    pub id: String,
    pub paths: Vec<Vec<usize>>,
    pub demand_range: (f64, f64),
}

impl IePair {
    pub fn k(&self) -> usize {
        self.paths.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub name: String,
    pub links: Vec<Link>,
    pub pairs: Vec<IePair>,
    pub bottlenecks: Vec<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyDoc {
    name: String,
    bottlenecks: Vec<String>,
    demand_range: Option<(f64, f64)>,
    links: Vec<LinkDoc>,
    pairs: Vec<PairDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkDoc {
    id: String,
    capacity: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairDoc {
    id: String,
    paths: Vec<Vec<String>>,
    demand_range: Option<(f64, f64)>,
}

impl Topology {
    /// Resolves a built-in name or a path to a topology file.
    pub fn load(spec: &str) -> Result<Self> {
        match builtin_source(spec) {
            Some(src) => Self::parse(src),
            None => {
                let path = Path::new(spec);
                if !path.exists() {
                    return Err(Error::Topology(format!(
                        "'{spec}' is neither a built-in ({}) nor an existing file",
                        BUILTIN_NAMES.join(", ")
                    )));
                }
                Self::parse(&std::fs::read_to_string(path)?)
            }
        }
    }

    pub fn builtin(name: &str) -> Result<Self> {
        builtin_source(name)
            .ok_or_else(|| Error::Topology(format!("unknown built-in topology '{name}'")))
            .and_then(Self::parse)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc: TopologyDoc = toml::from_str(text).map_err(|e| Error::Topology(e.to_string()))?;
        let mut index = HashMap::new();
        let mut links = Vec::with_capacity(doc.links.len());
        for l in doc.links {
            if !(l.capacity > 0.0 && l.capacity.is_finite()) {
                return Err(Error::Topology(format!("link {} has non-positive capacity {}", l.id, l.capacity)));
            }
            if index.insert(l.id.clone(), links.len()).is_some() {
                return Err(Error::Topology(format!("duplicate link id {}", l.id)));
            }
            links.push(Link {
                id: l.id,
                capacity: l.capacity,
            });
        }
        let resolve = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::Topology(format!("reference to undefined link '{id}'")))
        };
        let mut pairs = Vec::with_capacity(doc.pairs.len());
        for p in doc.pairs {
            let paths = p
                .paths
                .iter()
                .map(|path| path.iter().map(|l| resolve(l)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            let demand_range = p
                .demand_range
                .or(doc.demand_range)
                .ok_or_else(|| Error::Topology(format!("pair {} has no demand range", p.id)))?;
            pairs.push(IePair {
                id: p.id,
                paths,
                demand_range,
            });
        }
        let bottlenecks = doc
            .bottlenecks
            .iter()
            .map(|l| resolve(l))
            .collect::<Result<Vec<_>>>()?;
        let topo = Topology {
            name: doc.name,
            links,
            pairs,
            bottlenecks,
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Topology(m));
        if self.links.is_empty() || self.pairs.is_empty() {
            return err("topology needs links and pairs".into());
        }
        if self.bottlenecks.is_empty() {
            return err("at least one bottleneck link is required".into());
        }
        for p in &self.pairs {
            if p.paths.len() < 2 {
                return err(format!("pair {} needs at least two paths", p.id));
            }
            for (a, path) in p.paths.iter().enumerate() {
                if path.is_empty() {
                    return err(format!("pair {} has an empty path", p.id));
                }
                if path.iter().any(|&l| l >= self.links.len()) {
                    return err(format!("pair {} references a missing link", p.id));
                }
                if p.paths[..a].contains(path) {
                    return err(format!("pair {} lists the same path twice", p.id));
                }
            }
            let (lo, hi) = p.demand_range;
            if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
                return err(format!("pair {} has an invalid demand range", p.id));
            }
        }
        Ok(())
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Sorted, de-duplicated links on any of the pair's paths.
    pub fn observed_links(&self, pair: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.pairs[pair].paths.iter().flatten().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn max_k(&self) -> usize {
        self.pairs.iter().map(IePair::k).max().unwrap_or(0)
    }

    /// Serializes back to the same document format accepted by [`Topology::parse`].
    pub fn to_toml(&self) -> String {
        let mut s = format!("name = \"{}\"\nbottlenecks = [", self.name);
        s.push_str(
            &self
                .bottlenecks
                .iter()
                .map(|&l| format!("\"{}\"", self.links[l].id))
                .collect::<Vec<_>>()
                .join(", "),
        );
        s.push_str("]\n");
        for l in &self.links {
            s.push_str(&format!("\n[[links]]\nid = \"{}\"\ncapacity = {:?}\n", l.id, l.capacity));
        }
        for p in &self.pairs {
            let paths: Vec<String> = p
                .paths
                .iter()
                .map(|path| {
                    let ids: Vec<String> = path.iter().map(|&l| format!("\"{}\"", self.links[l].id)).collect();
                    format!("[{}]", ids.join(", "))
                })
                .collect();
            s.push_str(&format!(
                "\n[[pairs]]\nid = \"{}\"\npaths = [{}]\ndemand_range = [{:?}, {:?}]\n",
                p.id,
                paths.join(", "),
                p.demand_range.0,
                p.demand_range.1
            ));
        }
        s
    }
}

fn builtin_source(name: &str) -> Option<&'static str> {
    match name {
        "twoIE" => Some(TWO_IE),
        "threeIE" => Some(THREE_IE),
        "fiveIE" => Some(FIVE_IE),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_ie_has_three_bottlenecks() {
        let t = Topology::builtin("twoIE").unwrap();
        assert_eq!(t.n_pairs(), 2);
        let ids: Vec<&str> = t.bottlenecks.iter().map(|&l| t.links[l].id.as_str()).collect();
        assert_eq!(ids, ["L1", "L2", "L3"]);
        assert_eq!(t.observed_links(0), vec![0, 1]);
        assert_eq!(t.observed_links(1), vec![1, 2]);
    }

    #[test]
    fn five_ie_has_nine_bottlenecks() {
        let t = Topology::builtin("fiveIE").unwrap();
        assert_eq!(t.n_pairs(), 5);
        assert_eq!(t.bottlenecks.len(), 9);
        assert!(t.pairs.iter().all(|p| p.k() == 3));
        // every link is used, neighbours share a link
        let mut used = vec![0; 9];
        for p in &t.pairs {
            for path in &p.paths {
                used[path[0]] += 1;
            }
        }
        assert!(used.iter().all(|&u| u >= 1));
        for k in 0..5 {
            let a = t.observed_links(k);
            let b = t.observed_links((k + 1) % 5);
            assert!(a.iter().any(|l| b.contains(l)));
        }
    }

    #[test]
    fn three_ie_pairs_overlap_pairwise() {
        let t = Topology::builtin("threeIE").unwrap();
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    let la = t.observed_links(a);
                    assert!(t.observed_links(b).iter().any(|l| la.contains(l)));
                }
            }
        }
    }

    #[test]
    fn undefined_link_is_rejected() {
        let src = TWO_IE.replace("paths = [[\"L2\"], [\"L3\"]]", "paths = [[\"L2\"], [\"L7\"]]");
        let e = Topology::parse(&src).unwrap_err();
        assert!(e.to_string().contains("L7"));
    }

    #[test]
    fn non_positive_capacity_is_rejected() {
        let src = TWO_IE.replacen("capacity = 10.0", "capacity = 0.0", 1);
        assert!(matches!(Topology::parse(&src), Err(Error::Topology(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        let src = format!("{TWO_IE}\nbogus = 1\n");
        assert!(Topology::parse(&src).is_err());
    }

    #[test]
    fn toml_emission_round_trips() {
        for name in BUILTIN_NAMES {
            let t = Topology::builtin(name).unwrap();
            assert_eq!(Topology::parse(&t.to_toml()).unwrap(), t);
        }
    }
}
