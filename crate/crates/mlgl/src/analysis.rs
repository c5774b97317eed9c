//! Node correlation matrices, event/annoyance rank analysis and the fusion
//! ablation report.

use std::fmt::Write as _;

use mlgl_core::graph::FusionMode;
use mlgl_core::train::{assemble_batch, evaluate, Evaluation, Example, Trainer, TrainingConfig};
use mlgl_core::{Mlgl, ModelConfig, Real, Taxonomy};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::stats::{pearson, shapiro_wilk, spearman, ShapiroWilk, SpearmanResult};

/// Which node set is correlated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// One block per local graph (fAG, fcG, cAG), from the level-2 heads.
    Local,
    /// The 32-node global graph, from the level-3 heads.
    #[default]
    Global,
}

/// The per-clip scalar recorded for every node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeScalar {
    /// The node's prediction head output.
    #[default]
    Head,
    /// Projection of the node's embedding on its first principal component
    /// across clips.
    Pca,
}

/// Per-clip scalars of a set of nodes: `columns[node][clip]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeScores {
    pub name: String,
    pub labels: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl NodeScores {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip");
        for l in &self.labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push('\n');
        let clips = self.columns.first().map_or(0, Vec::len);
        for c in 0..clips {
            let _ = write!(out, "{c}");
            for col in &self.columns {
                let _ = write!(out, ",{}", col[c]);
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationMatrix {
    pub name: String,
    pub labels: Vec<String>,
    /// Row-major `n × n`; `NaN` off the diagonal of flagged nodes.
    pub values: Vec<f64>,
    /// Nodes whose scalar was constant across clips.
    pub flagged: Vec<bool>,
}

impl CorrelationMatrix {
    pub fn from_scores(scores: &NodeScores) -> Result<Self> {
        let n = scores.labels.len();
        let clips = scores.columns.first().map_or(0, Vec::len);
        if clips < 2 {
            return Err(mlgl_core::Error::Input("node correlation needs at least two clips".into()).into());
        }
        let flagged: Vec<bool> = scores
            .columns
            .iter()
            .map(|c| c.iter().all(|&v| v == c[0]))
            .collect();
        let mut values = vec![f64::NAN; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in 0..i {
                if flagged[i] || flagged[j] {
                    continue;
                }
                let r = pearson(&scores.columns[i], &scores.columns[j])?;
                values[i * n + j] = r;
                values[j * n + i] = r;
            }
        }
        Ok(CorrelationMatrix {
            name: scores.name.clone(),
            labels: scores.labels.clone(),
            values,
            flagged,
        })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size() + j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("node");
        for l in &self.labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            out.push_str(&csv_field(l));
            for j in 0..self.size() {
                let v = self.get(i, j);
                if v.is_nan() {
                    out.push_str(",NaN");
                } else {
                    let _ = write!(out, ",{v:.6}");
                }
            }
            out.push('\n');
        }
        out
    }

    /// Self-contained SVG heatmap on a blue–white–red scale; undefined cells
    /// are grey.
    pub fn to_svg(&self) -> String {
        let n = self.size();
        let cell = 14;
        let margin = 130;
        let side = margin + n * cell + 10;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{side}" font-family="sans-serif" font-size="9">"#
        );
        let _ = writeln!(s, r#"<title>{}</title>"#, xml_escape(&self.name));
        for (i, l) in self.labels.iter().enumerate() {
            let y = margin + i * cell + cell - 3;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{y}" text-anchor="end">{}</text>"#,
                margin - 4,
                xml_escape(l)
            );
            let x = margin + i * cell + cell - 3;
            let _ = writeln!(
                s,
                r#"<text transform="translate({x},{}) rotate(-90)">{}</text>"#,
                margin - 4,
                xml_escape(l)
            );
        }
        for i in 0..n {
            for j in 0..n {
                let v = self.get(i, j);
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="{}"><title>{} / {}: {}</title></rect>"#,
                    margin + j * cell,
                    margin + i * cell,
                    color(v),
                    xml_escape(&self.labels[i]),
                    xml_escape(&self.labels[j]),
                    if v.is_nan() { "undefined".to_string() } else { format!("{v:.3}") }
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn color(v: f64) -> String {
    if v.is_nan() {
        return "#bbbbbb".into();
    }
    let t = v.clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * (1.0 - x)).round() as u8;
    let (r, g, b) = if t >= 0.0 {
        (255, fade(t), fade(t))
    } else {
        (fade(-t), fade(-t), 255)
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Node names in role order: fine events, coarse events, `AR`.
pub fn node_labels(taxonomy: &Taxonomy) -> Vec<String> {
    let mut v: Vec<String> = taxonomy.fae_names().to_vec();
    v.extend(taxonomy.cae_names().iter().cloned());
    v.push("AR".into());
    v
}

fn local_labels(taxonomy: &Taxonomy) -> [(&'static str, Vec<String>); 3] {
    let ar = vec!["AR".to_string()];
    let fae = taxonomy.fae_names().to_vec();
    let cae = taxonomy.cae_names().to_vec();
    [
        ("fag", [fae.clone(), ar.clone()].concat()),
        ("fcg", [fae, cae.clone()].concat()),
        ("cag", [cae, ar].concat()),
    ]
}

/// First-principal-component scores of `rows` (`clips × dim`), with the sign
/// fixed so the largest loading is positive.
pub fn first_component(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let mean: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += r[a] * r[b];
            }
        }
    }
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    for _ in 0..500 {
        let mut next = vec![0.0; d];
        for a in 0..d {
            next[a] = (0..d).map(|b| cov[a * d + b] * v[b]).sum();
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return vec![0.0; n];
        }
        let delta: f64 = next.iter().zip(&v).map(|(x, y)| (x / norm - y).abs()).sum();
        v = next.into_iter().map(|x| x / norm).collect();
        if delta < 1e-13 {
            break;
        }
    }
    let peak = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if peak < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    centered.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum()).collect()
}

/// `[N, nodes, dim]` values → per-node `clips × dim` rows appended to `acc`.
fn push_embeddings(acc: &mut [Vec<Vec<f64>>], data: &[f64], batch: usize, dim: usize) {
    let nodes = acc.len();
    for b in 0..batch {
        for (k, node) in acc.iter_mut().enumerate() {
            let off = (b * nodes + k) * dim;
            node.push(data[off..off + dim].to_vec());
        }
    }
}

/// Records every node's per-clip scalar at `scope` for all `data`, in order.
pub fn node_scores<T: Real>(
    model: &Mlgl<T>,
    taxonomy: &Taxonomy,
    data: &[Example<T>],
    batch_size: usize,
    scope: Scope,
    scalar: NodeScalar,
) -> Result<Vec<NodeScores>> {
    let groups: Vec<(String, Vec<String>)> = match scope {
        Scope::Global => vec![("gcg".into(), node_labels(taxonomy))],
        Scope::Local => local_labels(taxonomy).into_iter().map(|(n, l)| (n.to_string(), l)).collect(),
    };
    let mut heads: Vec<Vec<Vec<f64>>> = groups.iter().map(|(_, l)| vec![Vec::new(); l.len()]).collect();
    let mut embeds: Vec<Vec<Vec<Vec<f64>>>> = groups.iter().map(|(_, l)| vec![Vec::new(); l.len()]).collect();
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Example<T>> = chunk.iter().collect();
        let (x, _) = assemble_batch(&refs)?;
        let batch = chunk.len();
        let mut tables: Vec<(Vec<f64>, Vec<f64>, usize)> = Vec::new();
        match scope {
            Scope::Global => {
                let preds = model.predict(&x)?;
                let l3 = &preds.levels[2];
                let (nf, nc) = (model.config().n_fae, model.config().n_cae);
                let mut rows = Vec::with_capacity(batch * (nf + nc + 1));
                for b in 0..batch {
                    rows.extend_from_slice(&l3.fae[b * nf..(b + 1) * nf]);
                    rows.extend_from_slice(&l3.cae[b * nc..(b + 1) * nc]);
                    rows.push(l3.ar[b]);
                }
                let emb = if scalar == NodeScalar::Pca {
                    model.node_embeddings(&x)?[2].to_f64()
                } else {
                    Vec::new()
                };
                tables.push((rows, emb, nf + nc + 1));
            }
            Scope::Local => {
                for (h, s) in model.local_outputs(&x)? {
                    let nodes = s.shape()[1];
                    tables.push((s.to_f64(), h.to_f64(), nodes));
                }
            }
        }
        for (g, (rows, emb, nodes)) in tables.into_iter().enumerate() {
            for b in 0..batch {
                for k in 0..nodes {
                    heads[g][k].push(rows[b * nodes + k]);
                }
            }
            if scalar == NodeScalar::Pca {
                push_embeddings(&mut embeds[g], &emb, batch, mlgl_core::EMBED_DIM);
            }
        }
    }
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(g, (name, labels))| {
            let columns = match scalar {
                NodeScalar::Head => std::mem::take(&mut heads[g]),
                NodeScalar::Pca => embeds[g].iter().map(|rows| first_component(rows)).collect(),
            };
            NodeScores { name, labels, columns }
        })
        .collect())
}

/// Correlation matrices between node scalars across clips: three local
/// blocks or one global matrix.
pub fn node_correlation<T: Real>(
    model: &Mlgl<T>,
    taxonomy: &Taxonomy,
    data: &[Example<T>],
    batch_size: usize,
    scope: Scope,
    scalar: NodeScalar,
) -> Result<Vec<CorrelationMatrix>> {
    node_scores(model, taxonomy, data, batch_size, scope, scalar)?
        .iter()
        .map(CorrelationMatrix::from_scores)
        .collect()
}

/// One fine event's rank association with the predicted annoyance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventArRow {
    pub event: String,
    /// Normality of the event's predicted scores; `None` when undefined.
    pub shapiro: Option<ShapiroWilk>,
    /// `None` when either score series is constant.
    pub spearman: Option<SpearmanResult>,
}

impl EventArRow {
    /// `rho` with `**` appended when significant.
    pub fn marked(&self) -> String {
        match self.spearman {
            Some(s) if s.significant => format!("{:.3}**", s.rho),
            Some(s) => format!("{:.3}", s.rho),
            None => "n/a".into(),
        }
    }
}

/// Shapiro–Wilk on each fine event's scores, then Spearman's rho between
/// each event's score and the annoyance prediction. `fae` is row-major
/// `clips × n_fae`.
pub fn event_ar_analysis(taxonomy: &Taxonomy, fae: &[f64], ar: &[f64]) -> Result<Vec<EventArRow>> {
    let n_fae = taxonomy.n_fae();
    let clips = ar.len();
    if fae.len() != clips * n_fae {
        return Err(mlgl_core::Error::Contract(format!(
            "event scores hold {} values, expected {clips} clips x {n_fae} events",
            fae.len()
        ))
        .into());
    }
    let mut rows = Vec::with_capacity(n_fae);
    for (k, name) in taxonomy.fae_names().iter().enumerate() {
        let scores: Vec<f64> = (0..clips).map(|c| fae[c * n_fae + k]).collect();
        rows.push(EventArRow {
            event: name.clone(),
            shapiro: soft(shapiro_wilk(&scores))?,
            spearman: soft(spearman(&scores, ar))?,
        });
    }
    Ok(rows)
}

fn soft<V>(r: Result<V>) -> Result<Option<V>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(crate::Error::Core(mlgl_core::Error::Undefined(_))) => Ok(None),
        Err(e) => Err(e),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".into(), |x| format!("{x:.6e}"))
}

/// `event,rho,p,significant,report`.
pub fn spearman_csv(rows: &[EventArRow]) -> String {
    let mut out = String::from("event,rho,p,significant,report\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            csv_field(&r.event),
            opt(r.spearman.map(|s| s.rho)),
            opt(r.spearman.map(|s| s.p_value)),
            r.spearman.is_some_and(|s| s.significant),
            r.marked()
        );
    }
    out
}

/// `event,w,p`.
pub fn shapiro_csv(rows: &[EventArRow]) -> String {
    let mut out = String::from("event,w,p\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{}",
            csv_field(&r.event),
            opt(r.shapiro.map(|s| s.w)),
            opt(r.shapiro.map(|s| s.p_value))
        );
    }
    out
}

/// Level-3 results of one fusion mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub fusion: FusionMode,
    pub params: usize,
    pub final_train_loss: f64,
    pub evaluation: Evaluation,
}

/// Trains one model per fusion mode from the same seed and evaluates each on
/// `eval`.
pub fn fusion_ablation(
    base: &ModelConfig,
    training: &TrainingConfig,
    train: &[Example<f32>],
    eval: &[Example<f32>],
    modes: &[FusionMode],
    mut progress: impl FnMut(FusionMode, usize, f64),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(modes.len());
    for &fusion in modes {
        let cfg = ModelConfig { fusion, ..base.clone() };
        let model = Mlgl::<f32>::new(cfg, training.seed)?;
        let params = model.param_count();
        let mut trainer = Trainer::new(model, training.clone())?;
        let mut last = f64::NAN;
        for epoch in 0..training.epochs {
            last = trainer.train_epoch(train, |_, _| {})?.losses.total;
            progress(fusion, epoch + 1, last);
        }
        let evaluation = evaluate(
            trainer.model(),
            eval,
            training.batch_size,
            &training.objective,
            training.threshold,
        )?;
        rows.push(AblationRow {
            fusion,
            params,
            final_train_loss: last,
            evaluation,
        });
    }
    Ok(rows)
}

/// Fusion comparison table: accuracy and AUC for fine and coarse events and
/// the annoyance regression metrics, all at level 3.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("fusion,params,fae_acc,fae_auc,cae_acc,cae_auc,ar_mse,ar_mae,ar_r2\n");
    for r in rows {
        let l = &r.evaluation.levels[2];
        let _ = writeln!(
            out,
            "{},{},{:.4},{},{:.4},{},{:.4},{:.4},{}",
            r.fusion.name(),
            r.params,
            l.fae.acc,
            opt(l.fae.auc),
            l.cae.acc,
            opt(l.cae.auc),
            l.ar_mse,
            l.ar_mae,
            opt(l.ar_r2)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use mlgl_core::SeededRng;

    fn scores(columns: Vec<Vec<f64>>) -> NodeScores {
        NodeScores {
            name: "t".into(),
            labels: (0..columns.len()).map(|i| format!("n{i}")).collect(),
            columns,
        }
    }

    #[test]
    fn matrix_is_symmetric_with_unit_diagonal() {
        let mut rng = SeededRng::new(2);
        let cols: Vec<Vec<f64>> = (0..6).map(|_| (0..20).map(|_| rng.normal()).collect()).collect();
        let m = CorrelationMatrix::from_scores(&scores(cols.clone())).unwrap();
        for i in 0..6 {
            assert_eq!(m.get(i, i), 1.0);
            for j in 0..6 {
                assert!((m.get(i, j) - m.get(j, i)).abs() < 1e-12);
                assert!(m.get(i, j).abs() <= 1.0);
            }
        }
        assert_eq!(m.get(1, 4), pearson(&cols[1], &cols[4]).unwrap());
    }

    #[test]
    fn constant_nodes_are_flagged() {
        let m = CorrelationMatrix::from_scores(&scores(vec![vec![1.0, 2.0, 3.0], vec![0.5; 3], vec![3.0, 1.0, 2.0]]))
            .unwrap();
        assert_eq!(m.flagged, vec![false, true, false]);
        assert!(m.get(0, 1).is_nan());
        assert!(!m.get(0, 2).is_nan());
        assert!(m.to_csv().lines().nth(2).unwrap().starts_with("n1,NaN,1.000000,NaN"));
    }

    #[test]
    fn svg_has_one_cell_per_entry() {
        let m = CorrelationMatrix::from_scores(&scores(vec![vec![1.0, 2.0, 4.0], vec![2.0, 1.0, 0.0]])).unwrap();
        let svg = m.to_svg();
        assert_eq!(svg.matches("<rect").count(), 4);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn first_component_recovers_dominant_direction() {
        let mut rng = SeededRng::new(5);
        let dir = [0.6, 0.8, 0.0];
        let mut t = Vec::new();
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let s = 3.0 * rng.normal();
                t.push(s);
                dir.iter().map(|d| d * s + 0.01 * rng.normal()).collect()
            })
            .collect();
        let pc = first_component(&rows);
        assert!(pearson(&pc, &t).unwrap() > 0.999);
    }

    #[test]
    fn event_rows_follow_taxonomy_order() {
        let tax = crate::data::default_taxonomy();
        let n = tax.n_fae();
        let mut rng = SeededRng::new(8);
        let clips = 40;
        let fae: Vec<f64> = (0..clips * n).map(|_| rng.uniform()).collect();
        let ar: Vec<f64> = (0..clips).map(|c| 3.0 * fae[c * n + 4] + 0.1 * rng.normal()).collect();
        let rows = event_ar_analysis(&tax, &fae, &ar).unwrap();
        assert_eq!(rows.len(), n);
        for (r, name) in rows.iter().zip(tax.fae_names()) {
            assert_eq!(&r.event, name);
        }
        assert!(rows[4].spearman.unwrap().significant);
        assert!(rows[4].marked().ends_with("**"));
        let csv = spearman_csv(&rows);
        assert_eq!(csv.lines().count(), n + 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn matrices_are_symmetric_with_unit_diagonal(
                columns in (2usize..12).prop_flat_map(|clips| {
                    proptest::collection::vec(proptest::collection::vec(-4i32..4, clips), 1..8)
                })
            ) {
                let columns: Vec<Vec<f64>> = columns.into_iter().map(|c| c.into_iter().map(f64::from).collect()).collect();
                let m = CorrelationMatrix::from_scores(&scores(columns)).unwrap();
                for i in 0..m.size() {
                    prop_assert_eq!(m.get(i, i), 1.0);
                    for j in 0..m.size() {
                        let (a, b) = (m.get(i, j), m.get(j, i));
                        prop_assert!(a.to_bits() == b.to_bits());
                        prop_assert!(a.is_nan() == (i != j && (m.flagged[i] || m.flagged[j])));
                    }
                }
            }
        }
    }
}
