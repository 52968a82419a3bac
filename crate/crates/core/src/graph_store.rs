//! Star-topology subgraphs: a center entity and its PageRank-ranked 1-hop
//! neighbors, loaded from and saved to the star graph JSON format.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on neighbors kept per center.
pub const MAX_NEIGHBORS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRef {
    pub qid: String,
    pub label: String,
    pub pagerank: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PredicateRef {
    pub pid: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub predicate: PredicateRef,
    pub entity: EntityRef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StarGraph {
    pub center: EntityRef,
    pub neighbors: Vec<Neighbor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegreeBucket {
    Isolated,
    Niche,
    Moderate,
    Famous,
}

impl DegreeBucket {
    pub const REPORTED: [DegreeBucket; 3] =
        [DegreeBucket::Niche, DegreeBucket::Moderate, DegreeBucket::Famous];

    pub fn name(self) -> &'static str {
        match self {
            DegreeBucket::Isolated => "isolated",
            DegreeBucket::Niche => "niche",
            DegreeBucket::Moderate => "moderate",
            DegreeBucket::Famous => "famous",
        }
    }
}

impl fmt::Display for DegreeBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Bucket for a neighbor count. 1–10 niche, 11–90 moderate, 91–100 famous;
/// counts above 100 never survive loading but are classed famous.
pub fn bucket_for_degree(m: usize) -> DegreeBucket {
    match m {
        0 => DegreeBucket::Isolated,
        1..=10 => DegreeBucket::Niche,
        11..=90 => DegreeBucket::Moderate,
        _ => DegreeBucket::Famous,
    }
}

fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.entity
        .pagerank
        .total_cmp(&a.entity.pagerank)
        .then_with(|| a.entity.qid.cmp(&b.entity.qid))
        .then_with(|| a.predicate.pid.cmp(&b.predicate.pid))
}

impl StarGraph {
    /// Builds a graph, enforcing ordering and the neighbor cap.
    pub fn new(center: EntityRef, mut neighbors: Vec<Neighbor>) -> Self {
        neighbors.sort_by(neighbor_order);
        if neighbors.len() > MAX_NEIGHBORS {
            log::warn!(
                "center {} has {} neighbors, keeping the top {} by pagerank",
                center.qid,
                neighbors.len(),
                MAX_NEIGHBORS
            );
            neighbors.truncate(MAX_NEIGHBORS);
        }
        Self { center, neighbors }
    }

    pub fn degree(&self) -> usize {
        self.neighbors.len()
    }

    /// The `limit` highest-ranked neighbors.
    pub fn top_neighbors(&self, limit: usize) -> &[Neighbor] {
        &self.neighbors[..limit.min(self.neighbors.len())]
    }

    pub fn degree_bucket(&self) -> DegreeBucket {
        bucket_for_degree(self.degree())
    }

    fn validate(&self) -> std::result::Result<(), String> {
        check_entity(&self.center)?;
        for (i, n) in self.neighbors.iter().enumerate() {
            check_entity(&n.entity).map_err(|e| format!("neighbor {i}: {e}"))?;
            if n.predicate.pid.is_empty() {
                return Err(format!("neighbor {i}: empty pid"));
            }
            if n.predicate.label.is_empty() {
                return Err(format!("neighbor {i}: empty predicate label"));
            }
            if n.entity.qid == self.center.qid {
                return Err(format!("neighbor {i}: self loop on {}", self.center.qid));
            }
        }
        Ok(())
    }
}

fn check_entity(e: &EntityRef) -> std::result::Result<(), String> {
    if e.qid.is_empty() {
        return Err("empty qid".into());
    }
    if e.label.is_empty() {
        return Err(format!("empty label for {}", e.qid));
    }
    if !e.pagerank.is_finite() || e.pagerank < 0.0 {
        return Err(format!("bad pagerank {} for {}", e.pagerank, e.qid));
    }
    Ok(())
}

/// Star graphs keyed by center qid.
pub type StarGraphs = BTreeMap<String, StarGraph>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NeighborRecord {
    qid: String,
    label: String,
    pagerank: f64,
    predicate: PredicateRef,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StarRecord {
    center: EntityRef,
    neighbors: Vec<NeighborRecord>,
}

impl From<StarRecord> for StarGraph {
    fn from(r: StarRecord) -> Self {
        let neighbors = r
            .neighbors
            .into_iter()
            .map(|n| Neighbor {
                predicate: n.predicate,
                entity: EntityRef {
                    qid: n.qid,
                    label: n.label,
                    pagerank: n.pagerank,
                },
            })
            .collect();
        StarGraph::new(r.center, neighbors)
    }
}

impl From<&StarGraph> for StarRecord {
    fn from(g: &StarGraph) -> Self {
        StarRecord {
            center: g.center.clone(),
            neighbors: g
                .neighbors
                .iter()
                .map(|n| NeighborRecord {
                    qid: n.entity.qid.clone(),
                    label: n.entity.label.clone(),
                    pagerank: n.entity.pagerank,
                    predicate: n.predicate.clone(),
                })
                .collect(),
        }
    }
}

/// Parses either a JSON array of records or one record per line, picked by
/// the first non-whitespace character.
pub fn parse_star_graphs(text: &str) -> Result<StarGraphs> {
    let records: Vec<(usize, StarRecord)> = match text.trim_start().chars().next() {
        None => Vec::new(),
        Some('[') => {
            let values: Vec<serde_json::Value> =
                serde_json::from_str(text).map_err(|e| Error::Parse {
                    index: 0,
                    message: e.to_string(),
                })?;
            values
                .into_iter()
                .enumerate()
                .map(|(i, v)| {
                    serde_json::from_value(v)
                        .map(|r| (i, r))
                        .map_err(|e| Error::Parse {
                            index: i,
                            message: e.to_string(),
                        })
                })
                .collect::<Result<_>>()?
        }
        Some(_) => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, line)| {
                serde_json::from_str(line)
                    .map(|r| (i, r))
                    .map_err(|e| Error::Parse {
                        index: i,
                        message: e.to_string(),
                    })
            })
            .collect::<Result<_>>()?,
    };

    let mut graphs = StarGraphs::new();
    for (index, record) in records {
        let graph = StarGraph::from(record);
        graph
            .validate()
            .map_err(|message| Error::Parse { index, message })?;
        let qid = graph.center.qid.clone();
        if graphs.insert(qid.clone(), graph).is_some() {
            return Err(Error::DuplicateCenter(qid));
        }
    }
    Ok(graphs)
}

pub fn load_star_graphs(path: impl AsRef<Path>) -> Result<StarGraphs> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_star_graphs(&text)
}

/// Canonical form: a JSON array ordered by center qid, one record per line.
pub fn to_canonical_json(graphs: &StarGraphs) -> String {
    let mut out = String::from("[\n");
    let n = graphs.len();
    for (i, g) in graphs.values().enumerate() {
        let rec = StarRecord::from(g);
        out.push_str(&serde_json::to_string(&rec).expect("star record serializes"));
        if i + 1 < n {
            out.push(',');
        }
        out.push('\n');
    }
    out.push_str("]\n");
    out
}

pub fn save_star_graphs(graphs: &StarGraphs, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_canonical_json(graphs)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ent(qid: &str, pr: f64) -> EntityRef {
        EntityRef {
            qid: qid.into(),
            label: format!("label {qid}"),
            pagerank: pr,
        }
    }

    fn nb(qid: &str, pr: f64) -> Neighbor {
        Neighbor {
            predicate: PredicateRef {
                pid: "P1".into(),
                label: "related to".into(),
            },
            entity: ent(qid, pr),
        }
    }

    fn record(center: &str, neighbors: &[(&str, f64)]) -> String {
        let ns: Vec<String> = neighbors
            .iter()
            .map(|(q, p)| {
                format!(
                    r#"{{"qid":"{q}","label":"L{q}","pagerank":{p},"predicate":{{"pid":"P1","label":"rel"}}}}"#
                )
            })
            .collect();
        format!(
            r#"{{"center":{{"qid":"{center}","label":"C","pagerank":1.0}},"neighbors":[{}]}}"#,
            ns.join(",")
        )
    }

    #[test]
    fn reorders_by_pagerank() {
        let text = format!("[{}]", record("Q1", &[("Q2", 0.1), ("Q3", 0.5), ("Q4", 0.3)]));
        let g = parse_star_graphs(&text).unwrap();
        let prs: Vec<f64> = g["Q1"].neighbors.iter().map(|n| n.entity.pagerank).collect();
        assert_eq!(prs, vec![0.5, 0.3, 0.1]);
    }

    #[test]
    fn empty_neighbors_accepted() {
        let g = parse_star_graphs(&record("Q1", &[])).unwrap();
        assert_eq!(g["Q1"].degree(), 0);
        assert_eq!(g["Q1"].degree_bucket(), DegreeBucket::Isolated);
    }

    #[test]
    fn truncates_to_one_hundred() {
        let owned: Vec<(String, f64)> =
            (0..120).map(|i| (format!("Q{}", i + 10), i as f64)).collect();
        let refs: Vec<(&str, f64)> = owned.iter().map(|(q, p)| (q.as_str(), *p)).collect();
        let g = parse_star_graphs(&record("Q1", &refs)).unwrap();
        let star = &g["Q1"];
        assert_eq!(star.degree(), 100);
        assert_eq!(star.neighbors[0].entity.pagerank, 119.0);
        assert_eq!(star.neighbors[99].entity.pagerank, 20.0);
    }

    #[test]
    fn line_delimited_variant() {
        let text = format!(
            "{}\n\n{}\n",
            record("Q1", &[("Q2", 0.2)]),
            record("Q5", &[("Q2", 0.2)])
        );
        let g = parse_star_graphs(&text).unwrap();
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn rejects_duplicate_center() {
        let text = format!("[{},{}]", record("Q1", &[]), record("Q1", &[]));
        assert!(matches!(
            parse_star_graphs(&text),
            Err(Error::DuplicateCenter(q)) if q == "Q1"
        ));
    }

    #[test]
    fn malformed_record_reports_index() {
        let text = format!("{}\n{{\"center\": 3}}\n", record("Q1", &[]));
        match parse_star_graphs(&text) {
            Err(Error::Parse { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_self_loop_and_negative_pagerank() {
        assert!(parse_star_graphs(&record("Q1", &[("Q1", 0.2)])).is_err());
        assert!(parse_star_graphs(&record("Q1", &[("Q2", -0.2)])).is_err());
    }

    #[test]
    fn top_neighbors_limits_and_ties() {
        let g = StarGraph::new(ent("Q1", 1.0), vec![nb("Q9", 0.5), nb("Q3", 0.3), nb("Q8", 0.1)]);
        let top: Vec<&str> = g.top_neighbors(2).iter().map(|n| n.entity.qid.as_str()).collect();
        assert_eq!(top, ["Q9", "Q3"]);
        assert_eq!(g.top_neighbors(10).len(), 3);

        let tie = StarGraph::new(ent("Q1", 1.0), vec![nb("Q7", 0.4), nb("Q2", 0.4)]);
        let order: Vec<&str> = tie.top_neighbors(2).iter().map(|n| n.entity.qid.as_str()).collect();
        assert_eq!(order, ["Q2", "Q7"]);
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!(bucket_for_degree(5), DegreeBucket::Niche);
        assert_eq!(bucket_for_degree(10), DegreeBucket::Niche);
        assert_eq!(bucket_for_degree(11), DegreeBucket::Moderate);
        assert_eq!(bucket_for_degree(90), DegreeBucket::Moderate);
        assert_eq!(bucket_for_degree(91), DegreeBucket::Famous);
        assert_eq!(bucket_for_degree(100), DegreeBucket::Famous);
        for m in 1..=100 {
            assert_ne!(bucket_for_degree(m), DegreeBucket::Isolated);
        }
    }

    fn arb_graphs() -> impl Strategy<Value = StarGraphs> {
        let neighbor = ("[a-z]{1,6}", "[ -~]{1,8}", 0.0f64..10.0, 0u8..4);
        let graph = (
            "[A-Z][a-z]{0,5}",
            0.0f64..10.0,
            proptest::collection::vec(neighbor, 0..12),
        );
        proptest::collection::vec(graph, 0..6).prop_map(|gs| {
            let mut out = StarGraphs::new();
            for (ci, (label, pr, ns)) in gs.into_iter().enumerate() {
                let center = EntityRef {
                    qid: format!("C{ci}"),
                    label,
                    pagerank: pr,
                };
                let neighbors = ns
                    .into_iter()
                    .map(|(q, l, p, pid)| Neighbor {
                        predicate: PredicateRef {
                            pid: format!("P{pid}"),
                            label: format!("pred {pid}"),
                        },
                        entity: EntityRef {
                            qid: format!("N{q}"),
                            label: l,
                            pagerank: p,
                        },
                    })
                    .collect();
                let g = StarGraph::new(center, neighbors);
                out.insert(g.center.qid.clone(), g);
            }
            out
        })
    }

    proptest! {
        #[test]
        fn canonical_round_trip(graphs in arb_graphs()) {
            let first = to_canonical_json(&graphs);
            let reloaded = parse_star_graphs(&first).unwrap();
            prop_assert_eq!(&reloaded, &graphs);
            prop_assert_eq!(to_canonical_json(&reloaded), first);
            for g in reloaded.values() {
                for w in g.neighbors.windows(2) {
                    prop_assert!(w[0].entity.pagerank >= w[1].entity.pagerank);
                }
            }
        }
    }
}
