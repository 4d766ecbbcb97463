//! File formats: CSV artifacts and the metrics JSON.
//!
//! Every writer has a matching loader and all floats are written with Rust's
//! shortest round-trip formatting, so emitted files parse back to identical
//! bit patterns and identical runs produce identical bytes.

use crate::aggregation::{AggregationBackend, PatchEmbeddingSet, SlideSummary};
use crate::error::{Error, Result};
use crate::fusion::{
    EncodingMode, FusionShapes, FusionWeights, LinearMap, ModalPool, Perceptron, PostFfn,
    PrototypeEncoding,
};
use crate::numerics::Matrix;
use crate::prototypes::PrototypeBank;
use crate::survival::{KmCurve, SurvivalRecord};
use std::fmt::Write as _;
use std::path::Path;

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn parse_f64(field: &str, path: &Path, line: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line,
        message: format!("expected a number, found '{field}'"),
    })
}

fn parse_usize(field: &str, path: &Path, line: usize) -> Result<usize> {
    field.trim().parse::<usize>().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line,
        message: format!("expected an integer, found '{field}'"),
    })
}

// ---------------------------------------------------------------------------
// prototype bank: proto_id,dim_0,...,dim_{D-1}

pub fn write_bank_csv(path: &Path, bank: &PrototypeBank) -> Result<()> {
    let mut out = String::from("proto_id");
    for d in 0..bank.dim() {
        write!(out, ",dim_{d}").unwrap();
    }
    out.push('\n');
    for c in 0..bank.count() {
        write!(out, "{c}").unwrap();
        for v in bank.centroid(c) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn load_bank_csv(path: &Path) -> Result<PrototypeBank> {
    let text = read_file(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: "bank row needs proto_id plus at least one dimension".into(),
            });
        }
        let mut row = Vec::with_capacity(fields.len() - 1);
        for f in &fields[1..] {
            row.push(parse_f64(f, path, lineno + 1)?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::data(format!(
            "bank file {} has no centroids",
            path.display()
        )));
    }
    PrototypeBank::new(Matrix::from_rows(&rows)?, 0)
}

// ---------------------------------------------------------------------------
// per-slide embeddings: patch_id,dim_0,...

pub fn write_embeddings_csv(path: &Path, set: &PatchEmbeddingSet) -> Result<()> {
    let mut out = String::from("patch_id");
    for d in 0..set.dim() {
        write!(out, ",dim_{d}").unwrap();
    }
    out.push('\n');
    for i in 0..set.len() {
        write!(out, "{i}").unwrap();
        for v in set.embeddings().row(i) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn load_embeddings_csv(path: &Path, slide_id: &str) -> Result<PatchEmbeddingSet> {
    let text = read_file(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: "embedding row needs patch_id plus at least one dimension".into(),
            });
        }
        let mut row = Vec::with_capacity(fields.len() - 1);
        for f in &fields[1..] {
            row.push(parse_f64(f, path, lineno + 1)?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::data(format!(
            "embedding file {} has no patches",
            path.display()
        )));
    }
    PatchEmbeddingSet::new(slide_id, Matrix::from_rows(&rows)?)
}

// ---------------------------------------------------------------------------
// expression: patient_id,<gene>,... one patient per row

#[derive(Debug, Clone)]
pub struct ExpressionTable {
    pub gene_names: Vec<String>,
    pub patients: Vec<(String, Vec<f64>)>,
}

pub fn write_expression_csv(path: &Path, table: &ExpressionTable) -> Result<()> {
    let mut out = String::from("patient_id");
    for g in &table.gene_names {
        write!(out, ",{g}").unwrap();
    }
    out.push('\n');
    for (pid, values) in &table.patients {
        write!(out, "{pid}").unwrap();
        for v in values {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn load_expression_csv(path: &Path) -> Result<ExpressionTable> {
    let text = read_file(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        line: 1,
        message: "missing header".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "patient_id" {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: "expression header must start with patient_id".into(),
        });
    }
    let gene_names: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
    let mut patients = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: format!(
                    "expected {} fields, found {}",
                    cols.len(),
                    fields.len()
                ),
            });
        }
        let mut values = Vec::with_capacity(gene_names.len());
        for f in &fields[1..] {
            values.push(parse_f64(f, path, lineno + 1)?);
        }
        patients.push((fields[0].to_string(), values));
    }
    Ok(ExpressionTable {
        gene_names,
        patients,
    })
}

// ---------------------------------------------------------------------------
// survival: patient_id,time_days,event

/// Meaning of the `event` column: under `DeathIs1` a 1 marks an observed
/// death; under `CensorIs1` a 1 marks censoring. Loaded records always use
/// event = death observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventConvention {
    DeathIs1,
    CensorIs1,
}

impl EventConvention {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "death1" => Ok(EventConvention::DeathIs1),
            "censor1" => Ok(EventConvention::CensorIs1),
            other => Err(Error::argument(format!(
                "unknown event convention '{other}' (use death1 or censor1)"
            ))),
        }
    }
}

pub fn write_survival_csv(path: &Path, records: &[SurvivalRecord]) -> Result<()> {
    let mut out = String::from("patient_id,time_days,event\n");
    for r in records {
        writeln!(
            out,
            "{},{},{}",
            r.patient_id,
            r.time,
            if r.event { 1 } else { 0 }
        )
        .unwrap();
    }
    write_file(path, &out)
}

pub fn load_survival_csv(path: &Path, convention: EventConvention) -> Result<Vec<SurvivalRecord>> {
    let text = read_file(path)?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let time = parse_f64(fields[1], path, lineno + 1)?;
        let flag = parse_usize(fields[2], path, lineno + 1)?;
        if flag > 1 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: format!("event flag must be 0 or 1, found {flag}"),
            });
        }
        let event = match convention {
            EventConvention::DeathIs1 => flag == 1,
            EventConvention::CensorIs1 => flag == 0,
        };
        records.push(SurvivalRecord::new(fields[0], time, event)?);
    }
    if records.is_empty() {
        return Err(Error::data(format!(
            "survival file {} has no records",
            path.display()
        )));
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// slide summary (long format): slide_id,proto_id,field,dim,value

pub fn write_summary_csv(path: &Path, summary: &SlideSummary) -> Result<()> {
    let mut out = String::from("slide_id,proto_id,field,dim,value\n");
    match (&summary.backend, &summary.gmm) {
        (AggregationBackend::Gmm, Some(p)) => {
            let d = p.mu.cols();
            for c in 0..summary.prototype_count() {
                writeln!(out, "{},{},pi,0,{}", summary.slide_id, c, p.pi[c]).unwrap();
                for j in 0..d {
                    writeln!(out, "{},{},mu,{},{}", summary.slide_id, c, j, p.mu.get(c, j))
                        .unwrap();
                }
                for j in 0..d {
                    writeln!(
                        out,
                        "{},{},sigma,{},{}",
                        summary.slide_id,
                        c,
                        j,
                        p.sigma.get(c, j)
                    )
                    .unwrap();
                }
            }
        }
        _ => {
            for c in 0..summary.prototype_count() {
                for j in 0..summary.summary_dim() {
                    writeln!(
                        out,
                        "{},{},z,{},{}",
                        summary.slide_id,
                        c,
                        j,
                        summary.rows.get(c, j)
                    )
                    .unwrap();
                }
            }
        }
    }
    write_file(path, &out)
}

/// Load a long-format summary back into (slide_id, field, matrix-of-values)
/// triples keyed by field name.
pub fn load_summary_csv(path: &Path) -> Result<Vec<(String, usize, String, usize, f64)>> {
    let text = read_file(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        rows.push((
            fields[0].to_string(),
            parse_usize(fields[1], path, lineno + 1)?,
            fields[2].to_string(),
            parse_usize(fields[3], path, lineno + 1)?,
            parse_f64(fields[4], path, lineno + 1)?,
        ));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// posteriors: slide_id,patch_id,proto_id,q  /  assignments: slide_id,patch_id,proto_id

pub fn write_posterior_csv(path: &Path, slide_id: &str, posteriors: &Matrix) -> Result<()> {
    let mut out = String::from("slide_id,patch_id,proto_id,q\n");
    for i in 0..posteriors.rows() {
        for c in 0..posteriors.cols() {
            writeln!(out, "{slide_id},{i},{c},{}", posteriors.get(i, c)).unwrap();
        }
    }
    write_file(path, &out)
}

pub fn load_posterior_csv(path: &Path) -> Result<Vec<(String, usize, usize, f64)>> {
    let text = read_file(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        rows.push((
            fields[0].to_string(),
            parse_usize(fields[1], path, lineno + 1)?,
            parse_usize(fields[2], path, lineno + 1)?,
            parse_f64(fields[3], path, lineno + 1)?,
        ));
    }
    Ok(rows)
}

pub fn write_assignment_csv(path: &Path, slide_id: &str, assignment: &[usize]) -> Result<()> {
    let mut out = String::from("slide_id,patch_id,proto_id\n");
    for (i, c) in assignment.iter().enumerate() {
        writeln!(out, "{slide_id},{i},{c}").unwrap();
    }
    write_file(path, &out)
}

pub fn load_assignment_csv(path: &Path) -> Result<Vec<(String, usize, usize)>> {
    let text = read_file(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        rows.push((
            fields[0].to_string(),
            parse_usize(fields[1], path, lineno + 1)?,
            parse_usize(fields[2], path, lineno + 1)?,
        ));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// attention / transport plans: row_id,col_id,value

pub fn write_attention_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = String::from("row_id,col_id,value\n");
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            writeln!(out, "{r},{c},{}", m.get(r, c)).unwrap();
        }
    }
    write_file(path, &out)
}

pub fn load_attention_csv(path: &Path) -> Result<Matrix> {
    let text = read_file(path)?;
    let mut entries: Vec<(usize, usize, f64)> = Vec::new();
    let mut max_r = 0usize;
    let mut max_c = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let r = parse_usize(fields[0], path, lineno + 1)?;
        let c = parse_usize(fields[1], path, lineno + 1)?;
        let v = parse_f64(fields[2], path, lineno + 1)?;
        max_r = max_r.max(r);
        max_c = max_c.max(c);
        entries.push((r, c, v));
    }
    if entries.is_empty() {
        return Err(Error::data(format!("{} is empty", path.display())));
    }
    let mut m = Matrix::zeros(max_r + 1, max_c + 1);
    for (r, c, v) in entries {
        m.set(r, c, v);
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// risk scores: patient_id,risk,split

pub fn write_risk_csv(path: &Path, rows: &[(String, f64, &str)]) -> Result<()> {
    let mut out = String::from("patient_id,risk,split\n");
    for (pid, risk, split) in rows {
        writeln!(out, "{pid},{risk},{split}").unwrap();
    }
    write_file(path, &out)
}

pub fn load_risk_csv(path: &Path) -> Result<Vec<(String, f64, String)>> {
    let text = read_file(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        rows.push((
            fields[0].to_string(),
            parse_f64(fields[1], path, lineno + 1)?,
            fields[2].to_string(),
        ));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// metrics JSON

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub c_index: f64,
    pub logrank_chi_sq: f64,
    pub logrank_p: f64,
    pub km_high: KmCurve,
    pub km_low: KmCurve,
}

pub fn write_metrics_json(path: &Path, metrics: &Metrics) -> Result<()> {
    let mut text = serde_json::to_string_pretty(metrics)
        .map_err(|e| Error::data(format!("metrics serialization failed: {e}")))?;
    text.push('\n');
    write_file(path, &text)
}

pub fn load_metrics_json(path: &Path) -> Result<Metrics> {
    let text = read_file(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// weight checkpoint: a single CSV bundle with a manifest
//
// kind,name,a,b,value
//   meta rows carry scalar configuration (a = value)
//   shape rows declare each tensor (a = rows, b = cols)
//   entry rows carry tensor entries (a = row, b = col)

fn push_tensor(out: &mut String, name: &str, m: &Matrix) {
    writeln!(out, "shape,{name},{},{},", m.rows(), m.cols()).unwrap();
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            writeln!(out, "entry,{name},{r},{c},{}", m.get(r, c)).unwrap();
        }
    }
}

fn push_vector(out: &mut String, name: &str, v: &[f64]) {
    writeln!(out, "shape,{name},1,{},", v.len()).unwrap();
    for (c, x) in v.iter().enumerate() {
        writeln!(out, "entry,{name},0,{c},{x}").unwrap();
    }
}

fn perceptron_tensors(prefix: &str, p: &Perceptron, out: &mut String) {
    push_tensor(out, &format!("{prefix}.w1"), &p.w1);
    push_vector(out, &format!("{prefix}.b1"), &p.b1);
    push_tensor(out, &format!("{prefix}.w2"), &p.w2);
    push_vector(out, &format!("{prefix}.b2"), &p.b2);
}

pub fn write_weights_csv(path: &Path, w: &FusionWeights) -> Result<()> {
    let mut out = String::from("kind,name,a,b,value\n");
    writeln!(out, "meta,seed,{},,", w.seed).unwrap();
    writeln!(out, "meta,c_g,{},,", w.shapes.c_g).unwrap();
    writeln!(out, "meta,c_h,{},,", w.shapes.c_h).unwrap();
    writeln!(out, "meta,d_h,{},,", w.shapes.d_h).unwrap();
    writeln!(out, "meta,d,{},,", w.shapes.d).unwrap();
    writeln!(out, "meta,hidden_pre,{},,", w.shapes.hidden_pre).unwrap();
    writeln!(out, "meta,d_out,{},,", w.shapes.d_out).unwrap();
    writeln!(out, "meta,hidden_post,{},,", w.shapes.hidden_post).unwrap();
    writeln!(out, "meta,d_e,{},,", w.shapes.d_e).unwrap();
    writeln!(
        out,
        "meta,per_prototype_post,{},,",
        if w.shapes.per_prototype_post { 1 } else { 0 }
    )
    .unwrap();
    writeln!(out, "meta,encoding_mode,{},,", w.encoding.mode.name()).unwrap();
    writeln!(
        out,
        "meta,pool,{},,",
        match w.pool {
            ModalPool::Mean => "mean",
            ModalPool::Sum => "sum",
        }
    )
    .unwrap();
    let sizes: Vec<String> = w
        .shapes
        .pathway_sizes
        .iter()
        .map(|s| s.to_string())
        .collect();
    writeln!(out, "meta,pathway_sizes,{},,", sizes.join(";")).unwrap();

    push_tensor(&mut out, "f_h_pre.weight", &w.f_h_pre.weight);
    push_vector(&mut out, "f_h_pre.bias", &w.f_h_pre.bias);
    for (c, p) in w.f_g_pre.iter().enumerate() {
        perceptron_tensors(&format!("f_g_pre.{c}"), p, &mut out);
    }
    push_tensor(&mut out, "w_q", &w.w_q);
    push_tensor(&mut out, "w_k", &w.w_k);
    push_tensor(&mut out, "w_v", &w.w_v);
    match &w.post {
        PostFfn::PerPrototype(v) => {
            for (slot, p) in v.iter().enumerate() {
                perceptron_tensors(&format!("post.{slot}"), p, &mut out);
            }
        }
        PostFfn::Shared(p) => perceptron_tensors("post.shared", p, &mut out),
    }
    push_vector(&mut out, "ln_gain", &w.ln_gain);
    push_vector(&mut out, "ln_bias", &w.ln_bias);
    push_tensor(&mut out, "encoding.table", &w.encoding.table);
    push_vector(&mut out, "f_pred", &w.f_pred);
    write_file(path, &out)
}

pub fn load_weights_csv(path: &Path) -> Result<FusionWeights> {
    use std::collections::HashMap;
    let text = read_file(path)?;
    let mut meta: HashMap<String, String> = HashMap::new();
    let mut shapes: HashMap<String, (usize, usize)> = HashMap::new();
    let mut tensors: HashMap<String, Matrix> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(5, ',').collect();
        if fields.len() < 5 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: "checkpoint row needs 5 fields".into(),
            });
        }
        match fields[0] {
            "meta" => {
                meta.insert(fields[1].to_string(), fields[2].to_string());
            }
            "shape" => {
                let r = parse_usize(fields[2], path, lineno + 1)?;
                let c = parse_usize(fields[3], path, lineno + 1)?;
                shapes.insert(fields[1].to_string(), (r, c));
                tensors.insert(fields[1].to_string(), Matrix::zeros(r, c));
            }
            "entry" => {
                let r = parse_usize(fields[2], path, lineno + 1)?;
                let c = parse_usize(fields[3], path, lineno + 1)?;
                let v = parse_f64(fields[4], path, lineno + 1)?;
                let t = tensors.get_mut(fields[1]).ok_or_else(|| Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    message: format!("entry for undeclared tensor '{}'", fields[1]),
                })?;
                t.set(r, c, v);
            }
            other => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    message: format!("unknown row kind '{other}'"),
                });
            }
        }
    }
    let meta_usize = |key: &str| -> Result<usize> {
        meta.get(key)
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| Error::data(format!("checkpoint missing meta '{key}'")))
    };
    let take = |tensors: &HashMap<String, Matrix>, name: &str| -> Result<Matrix> {
        tensors
            .get(name)
            .cloned()
            .ok_or_else(|| Error::data(format!("checkpoint missing tensor '{name}'")))
    };
    let take_vec = |tensors: &HashMap<String, Matrix>, name: &str| -> Result<Vec<f64>> {
        Ok(take(tensors, name)?.data().to_vec())
    };
    let pathway_sizes: Vec<usize> = meta
        .get("pathway_sizes")
        .ok_or_else(|| Error::data("checkpoint missing meta 'pathway_sizes'"))?
        .split(';')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::data("bad pathway_sizes meta"))
        })
        .collect::<Result<_>>()?;
    let c_g = meta_usize("c_g")?;
    let c_h = meta_usize("c_h")?;
    let per_prototype_post = meta_usize("per_prototype_post")? == 1;
    let mode = EncodingMode::parse(
        meta.get("encoding_mode")
            .ok_or_else(|| Error::data("checkpoint missing meta 'encoding_mode'"))?,
    )?;
    let pool = match meta.get("pool").map(|s| s.as_str()) {
        Some("mean") => ModalPool::Mean,
        Some("sum") => ModalPool::Sum,
        _ => return Err(Error::data("checkpoint missing meta 'pool'")),
    };
    let load_perceptron = |prefix: &str| -> Result<Perceptron> {
        Ok(Perceptron {
            w1: take(&tensors, &format!("{prefix}.w1"))?,
            b1: take_vec(&tensors, &format!("{prefix}.b1"))?,
            w2: take(&tensors, &format!("{prefix}.w2"))?,
            b2: take_vec(&tensors, &format!("{prefix}.b2"))?,
        })
    };
    let mut f_g_pre = Vec::with_capacity(c_g);
    for c in 0..c_g {
        f_g_pre.push(load_perceptron(&format!("f_g_pre.{c}"))?);
    }
    let post = if per_prototype_post {
        let mut v = Vec::with_capacity(c_g + c_h);
        for slot in 0..c_g + c_h {
            v.push(load_perceptron(&format!("post.{slot}"))?);
        }
        PostFfn::PerPrototype(v)
    } else {
        PostFfn::Shared(load_perceptron("post.shared")?)
    };
    let table = take(&tensors, "encoding.table")?;
    let d_e = meta_usize("d_e")?;
    Ok(FusionWeights {
        shapes: FusionShapes {
            c_g,
            c_h,
            d_h: meta_usize("d_h")?,
            pathway_sizes,
            d: meta_usize("d")?,
            hidden_pre: meta_usize("hidden_pre")?,
            d_out: meta_usize("d_out")?,
            hidden_post: meta_usize("hidden_post")?,
            d_e,
            per_prototype_post,
        },
        f_h_pre: LinearMap {
            weight: take(&tensors, "f_h_pre.weight")?,
            bias: take_vec(&tensors, "f_h_pre.bias")?,
        },
        f_g_pre,
        w_q: take(&tensors, "w_q")?,
        w_k: take(&tensors, "w_k")?,
        w_v: take(&tensors, "w_v")?,
        post,
        ln_gain: take_vec(&tensors, "ln_gain")?,
        ln_bias: take_vec(&tensors, "ln_bias")?,
        f_pred: take_vec(&tensors, "f_pred")?,
        encoding: PrototypeEncoding { mode, d_e, table },
        pool,
        seed: meta
            .get("seed")
            .and_then(|v| v.parse::<u64>().ok())
            .ok_or_else(|| Error::data("checkpoint missing meta 'seed'"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::init_weights;
    use crate::numerics::SeededRng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("protofuse-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn bank_round_trip_bit_exact() {
        let mut rng = SeededRng::new(5);
        let data: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let bank = PrototypeBank::new(Matrix::from_vec(3, 4, data).unwrap(), 7).unwrap();
        let path = tmp("bank.csv");
        write_bank_csv(&path, &bank).unwrap();
        let loaded = load_bank_csv(&path).unwrap();
        assert_eq!(bank.centroids().data(), loaded.centroids().data());
    }

    #[test]
    fn embeddings_round_trip() {
        let mut rng = SeededRng::new(6);
        let data: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let set = PatchEmbeddingSet::new("sl", Matrix::from_vec(5, 4, data).unwrap()).unwrap();
        let path = tmp("emb.csv");
        write_embeddings_csv(&path, &set).unwrap();
        let loaded = load_embeddings_csv(&path, "sl").unwrap();
        assert_eq!(set.embeddings().data(), loaded.embeddings().data());
    }

    #[test]
    fn survival_round_trip_and_conventions() {
        let records = vec![
            SurvivalRecord::new("a", 10.0, true).unwrap(),
            SurvivalRecord::new("b", 20.5, false).unwrap(),
        ];
        let path = tmp("surv.csv");
        write_survival_csv(&path, &records).unwrap();
        let loaded = load_survival_csv(&path, EventConvention::DeathIs1).unwrap();
        assert_eq!(records, loaded);
        // inverted convention flips the flags
        let flipped = load_survival_csv(&path, EventConvention::CensorIs1).unwrap();
        assert!(!flipped[0].event);
        assert!(flipped[1].event);
    }

    #[test]
    fn metrics_round_trip() {
        let m = Metrics {
            c_index: 0.8125,
            logrank_chi_sq: 4.5,
            logrank_p: 0.03389485352468927,
            km_high: KmCurve {
                times: vec![0.0, 1.0],
                survival: vec![1.0, 0.5],
            },
            km_low: KmCurve {
                times: vec![0.0],
                survival: vec![1.0],
            },
        };
        let path = tmp("metrics.json");
        write_metrics_json(&path, &m).unwrap();
        let loaded = load_metrics_json(&path).unwrap();
        assert_eq!(m.c_index.to_bits(), loaded.c_index.to_bits());
        assert_eq!(m.logrank_p.to_bits(), loaded.logrank_p.to_bits());
        assert_eq!(m.km_high, loaded.km_high);
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        use crate::fusion::{EncodingMode, FusionShapes, ModalPool};
        let shapes = FusionShapes {
            c_g: 3,
            c_h: 2,
            d_h: 5,
            pathway_sizes: vec![2, 4, 3],
            d: 4,
            hidden_pre: 4,
            d_out: 3,
            hidden_post: 4,
            d_e: 32,
            per_prototype_post: true,
        };
        let w = init_weights(shapes, 123, EncodingMode::Learnable, ModalPool::Mean).unwrap();
        let path = tmp("weights.csv");
        write_weights_csv(&path, &w).unwrap();
        let loaded = load_weights_csv(&path).unwrap();
        assert_eq!(w.w_q.data(), loaded.w_q.data());
        assert_eq!(w.f_pred, loaded.f_pred);
        assert_eq!(w.f_g_pre[1].w2.data(), loaded.f_g_pre[1].w2.data());
        assert_eq!(w.encoding.table.data(), loaded.encoding.table.data());
        assert_eq!(w.shapes.pathway_sizes, loaded.shapes.pathway_sizes);
        match (&w.post, &loaded.post) {
            (PostFfn::PerPrototype(a), PostFfn::PerPrototype(b)) => {
                assert_eq!(a.len(), b.len());
                assert_eq!(a[4].w1.data(), b[4].w1.data());
            }
            _ => panic!("post-FFN kind changed in round trip"),
        }
    }

    #[test]
    fn attention_round_trip() {
        let mut rng = SeededRng::new(9);
        let data: Vec<f64> = (0..12).map(|_| rng.uniform()).collect();
        let m = Matrix::from_vec(3, 4, data).unwrap();
        let path = tmp("attn.csv");
        write_attention_csv(&path, &m).unwrap();
        let loaded = load_attention_csv(&path).unwrap();
        assert_eq!(m.data(), loaded.data());
    }
}
