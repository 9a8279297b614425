//! Collapse groups of highly correlated genes to one representative.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ExpressionMatrix;
use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeclusterOptions {
    pub r_threshold: f64,
    /// Link anti-correlated genes too (|r| rather than r).
    pub absolute: bool,
}

impl Default for DeclusterOptions {
    fn default() -> Self {
        Self {
            r_threshold: 0.9,
            absolute: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub rep: String,
    pub members: Vec<String>,
}

/// Disjoint clusters covering every gene, singletons included.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMap {
    pub clusters: Vec<Cluster>,
    pub threshold: f64,
}

impl ClusterMap {
    pub fn representatives(&self) -> Vec<&str> {
        self.clusters.iter().map(|c| c.rep.as_str()).collect()
    }

    /// Clusters with more than one member.
    pub fn multi_member(&self) -> impl Iterator<Item = &Cluster> {
        self.clusters.iter().filter(|c| c.members.len() > 1)
    }

    /// Keep only representative rows of `m`, in `m`'s order.
    pub fn select(&self, m: &ExpressionMatrix) -> Result<ExpressionMatrix> {
        let index: HashMap<&str, usize> = m.gene_ids().iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
        let mut rows = self
            .clusters
            .iter()
            .map(|c| {
                index
                    .get(c.rep.as_str())
                    .copied()
                    .ok_or_else(|| Error::Shape(format!("representative '{}' missing from matrix", c.rep)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.sort_unstable();
        Ok(m.select_genes(&rows))
    }

    pub fn to_json(&self, include_singletons: bool) -> Result<String> {
        let clusters: Vec<&Cluster> = self
            .clusters
            .iter()
            .filter(|c| include_singletons || c.members.len() > 1)
            .collect();
        Ok(serde_json::to_string_pretty(&clusters)?)
    }

    /// Parse the JSON array form. Genes in `all_genes` not mentioned become singletons.
    pub fn from_json(json: &str, threshold: f64, all_genes: Option<&[String]>) -> Result<Self> {
        let mut clusters: Vec<Cluster> = serde_json::from_str(json)?;
        if let Some(genes) = all_genes {
            let known: std::collections::HashSet<String> =
                clusters.iter().flat_map(|c| c.members.iter().cloned()).collect();
            for g in genes {
                if !known.contains(g) {
                    clusters.push(Cluster {
                        rep: g.clone(),
                        members: vec![g.clone()],
                    });
                }
            }
        }
        Ok(Self { clusters, threshold })
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Connected components of the graph with an edge wherever the Pearson
/// correlation passes the threshold. Each component keeps its highest-variance
/// gene (lexicographically smallest ID on ties), measured on `variance_source`
/// when given, otherwise on `m`.
pub fn decluster(
    m: &ExpressionMatrix,
    opts: &DeclusterOptions,
    variance_source: Option<&ExpressionMatrix>,
) -> Result<(ExpressionMatrix, ClusterMap)> {
    if !(opts.r_threshold > 0.0 && opts.r_threshold < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "correlation threshold {} must lie in (0, 1)",
            opts.r_threshold
        )));
    }
    let n_genes = m.n_genes();
    let standardized: Vec<Option<Vec<f64>>> = m
        .values()
        .outer_iter()
        .map(|row| {
            let mean = row.sum() / row.len() as f64;
            let centered: Vec<f64> = row.iter().map(|v| v - mean).collect();
            let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
            (norm > 0.0).then(|| centered.iter().map(|v| v / norm).collect())
        })
        .collect();

    let edges: Vec<(usize, usize)> = (0..n_genes)
        .into_par_iter()
        .flat_map_iter(|i| {
            let standardized = &standardized;
            (i + 1..n_genes).filter_map(move |j| {
                let (a, b) = (standardized[i].as_ref()?, standardized[j].as_ref()?);
                let r: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let r = if opts.absolute { r.abs() } else { r };
                (r > opts.r_threshold).then_some((i, j))
            })
        })
        .collect();

    let mut parent: Vec<usize> = (0..n_genes).collect();
    for (i, j) in edges {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri.max(rj)] = ri.min(rj);
        }
    }

    let variances: Vec<f64> = match variance_source {
        Some(src) => {
            let by_gene: HashMap<&str, f64> = src
                .gene_ids()
                .iter()
                .zip(src.values().outer_iter())
                .map(|(g, row)| (g.as_str(), stats::variance(row.iter().copied())))
                .collect();
            m.gene_ids()
                .iter()
                .map(|g| {
                    by_gene
                        .get(g.as_str())
                        .copied()
                        .ok_or_else(|| Error::Shape(format!("gene '{g}' missing from variance source")))
                })
                .collect::<Result<_>>()?
        }
        None => m
            .values()
            .outer_iter()
            .map(|row| stats::variance(row.iter().copied()))
            .collect(),
    };

    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for g in 0..n_genes {
        let root = find(&mut parent, g);
        components.entry(root).or_default().push(g);
    }
    let ids = m.gene_ids();
    let mut clusters: Vec<(usize, Cluster)> = components
        .into_values()
        .map(|members| {
            let rep = *members
                .iter()
                .max_by(|&&a, &&b| variances[a].total_cmp(&variances[b]).then_with(|| ids[b].cmp(&ids[a])))
                .expect("component is non-empty");
            (
                rep,
                Cluster {
                    rep: ids[rep].clone(),
                    members: members.iter().map(|&g| ids[g].clone()).collect(),
                },
            )
        })
        .collect();
    clusters.sort_by_key(|(rep, _)| *rep);
    let rows: Vec<usize> = clusters.iter().map(|(r, _)| *r).collect();
    let cmap = ClusterMap {
        clusters: clusters.into_iter().map(|(_, c)| c).collect(),
        threshold: opts.r_threshold,
    };
    Ok((m.select_genes(&rows), cmap))
}

/// Give every member of a scored representative's cluster the representative's score.
pub fn expand_importance(scores: &BTreeMap<String, f64>, cmap: &ClusterMap) -> Result<BTreeMap<String, f64>> {
    let by_rep: HashMap<&str, &Cluster> = cmap.clusters.iter().map(|c| (c.rep.as_str(), c)).collect();
    let mut out = BTreeMap::new();
    for (gene, &score) in scores {
        let cluster = by_rep
            .get(gene.as_str())
            .ok_or_else(|| Error::UnknownRepresentative(gene.clone()))?;
        for m in &cluster.members {
            out.insert(m.clone(), score);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(genes: &[&str], values: Array2<f64>) -> ExpressionMatrix {
        let s = values.ncols();
        ExpressionMatrix::new(
            genes.iter().map(|g| g.to_string()).collect(),
            (0..s).map(|i| format!("s{i}")).collect(),
            values,
        )
        .unwrap()
    }

    #[test]
    fn duplicate_rows_keep_higher_variance() {
        // B is A scaled by sqrt(2): r = 1, twice the variance
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let values = Array2::from_shape_fn((3, 5), |(g, j)| match g {
            0 => a[j],
            1 => a[j] * 2.0f64.sqrt(),
            _ => [3.0, -1.0, 4.0, 1.0, -5.0][j],
        });
        let m = matrix(&["A", "B", "C"], values);
        let (out, cmap) = decluster(&m, &DeclusterOptions::default(), None).unwrap();
        assert_eq!(out.gene_ids(), &["B".to_string(), "C".to_string()]);
        let multi: Vec<_> = cmap.multi_member().collect();
        assert_eq!(multi.len(), 1);
        assert_eq!(multi[0].rep, "B");
        assert_eq!(multi[0].members, vec!["A".to_string(), "B".to_string()]);
    }

    #[test]
    fn tie_broken_lexicographically_and_sign_modes() {
        let values = array![[1.0, 2.0, 3.0, 4.0], [-1.0, -2.0, -3.0, -4.0]];
        let m = matrix(&["Z", "Y"], values);
        let (out, cmap) = decluster(&m, &DeclusterOptions::default(), None).unwrap();
        assert_eq!(out.gene_ids(), &["Y".to_string()]);
        assert_eq!(cmap.clusters.len(), 1);
        let signed = DeclusterOptions {
            absolute: false,
            ..Default::default()
        };
        let (out, _) = decluster(&m, &signed, None).unwrap();
        assert_eq!(out.n_genes(), 2);
    }

    #[test]
    fn uncorrelated_input_unchanged() {
        let values = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        let m = matrix(&["A", "B", "C"], values);
        let (out, cmap) = decluster(&m, &DeclusterOptions::default(), None).unwrap();
        assert_eq!(out, m);
        assert!(cmap.clusters.iter().all(|c| c.members.len() == 1));
    }

    #[test]
    fn variance_source_overrides() {
        let values = array![[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]];
        let m = matrix(&["A", "B"], values);
        let src = matrix(&["A", "B"], array![[0.0, 10.0, 20.0], [0.0, 1.0, 2.0]]);
        let (out, _) = decluster(&m, &DeclusterOptions::default(), Some(&src)).unwrap();
        assert_eq!(out.gene_ids(), &["A".to_string()]);
    }

    #[test]
    fn expand_scores() {
        let cmap = ClusterMap {
            clusters: vec![
                Cluster {
                    rep: "A".into(),
                    members: vec!["A".into(), "B".into(), "C".into()],
                },
                Cluster {
                    rep: "D".into(),
                    members: vec!["D".into()],
                },
                Cluster {
                    rep: "E".into(),
                    members: vec!["E".into(), "F".into()],
                },
            ],
            threshold: 0.9,
        };
        let scores = BTreeMap::from([("A".to_string(), 0.7), ("D".to_string(), 0.2)]);
        let out = expand_importance(&scores, &cmap).unwrap();
        assert_eq!(
            out,
            BTreeMap::from([
                ("A".to_string(), 0.7),
                ("B".to_string(), 0.7),
                ("C".to_string(), 0.7),
                ("D".to_string(), 0.2)
            ])
        );
        let bad = BTreeMap::from([("B".to_string(), 0.1)]);
        assert!(matches!(expand_importance(&bad, &cmap), Err(Error::UnknownRepresentative(ref g)) if g == "B"));

        let json = cmap.to_json(false).unwrap();
        let all: Vec<String> = ["A", "B", "C", "D", "E", "F"].iter().map(|s| s.to_string()).collect();
        let back = ClusterMap::from_json(&json, 0.9, Some(&all)).unwrap();
        assert_eq!(back.clusters.len(), 3);
        assert!(json.contains("\"rep\""));
    }

    proptest! {
        #[test]
        fn clusters_partition_genes(seed in 0u64..300, genes in 2usize..25) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = Array2::from_shape_fn((4, 12), |_| rng.random::<f64>());
            let values = Array2::from_shape_fn((genes, 12), |(g, j)| {
                base[[g % 4, j]] * (1.0 + g as f64) + 0.05 * rng.random::<f64>()
            });
            let names: Vec<String> = (0..genes).map(|g| format!("g{g:02}")).collect();
            let m = ExpressionMatrix::new(names.clone(), (0..12).map(|i| format!("s{i}")).collect(), values).unwrap();
            let opts = DeclusterOptions::default();
            let (out, cmap) = decluster(&m, &opts, None).unwrap();
            let (out2, cmap2) = decluster(&m, &opts, None).unwrap();
            prop_assert_eq!(&out, &out2);
            prop_assert_eq!(&cmap, &cmap2);
            let mut all: Vec<String> = cmap.clusters.iter().flat_map(|c| c.members.clone()).collect();
            all.sort();
            prop_assert_eq!(all, names);
            let var = |g: &str| {
                let i = m.gene_index(g).unwrap();
                stats::variance(m.values().row(i).iter().copied())
            };
            for c in &cmap.clusters {
                prop_assert!(c.members.contains(&c.rep));
                for mem in &c.members {
                    prop_assert!(var(&c.rep) >= var(mem));
                }
            }
            // representatives are never directly linked
            let reps: Vec<usize> = out.gene_ids().iter().map(|g| m.gene_index(g).unwrap()).collect();
            for (a, &i) in reps.iter().enumerate() {
                for &j in &reps[a + 1..] {
                    let x: Vec<f64> = m.values().row(i).to_vec();
                    let y: Vec<f64> = m.values().row(j).to_vec();
                    let mx = stats::mean(x.iter().copied());
                    let my = stats::mean(y.iter().copied());
                    let num: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
                    let den = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>()
                        * y.iter().map(|b| (b - my).powi(2)).sum::<f64>()).sqrt();
                    prop_assert!((num / den).abs() <= opts.r_threshold + 1e-12);
                }
            }
        }
    }
}
