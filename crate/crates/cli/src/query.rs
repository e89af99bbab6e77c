//! Marginal-CDF query files.
//!
//! A query CSV has the model's raw covariate columns, a `y` column and,
//! for stratified models, the strata column. Consecutive rows sharing the
//! same covariates form one block; every block becomes one marginal
//! distribution function evaluated at its `y` values.

use std::collections::HashMap;
use std::path::Path;

use anyhow::Context;

use mitram_core::io::{fmt17, SpecFile};
use mitram_core::marginal::{marginal_cdf, marginal_effect_scale, MarginalQuery};
use mitram_core::{ModelSpec, ParameterVector};

use crate::InputError;

pub struct Block {
    pub values: Vec<f64>,
    pub stratum_label: Option<String>,
    pub query: MarginalQuery,
}

fn term(name: &str, index: &HashMap<&str, usize>, values: &[f64]) -> f64 {
    name.split(':')
        .map(str::trim)
        .map(|p| if p == "1" { 1.0 } else { values[index[p]] })
        .product()
}

pub fn read(path: &Path, file: &SpecFile, levels: &[String]) -> anyhow::Result<Vec<Block>> {
    let input = |msg: String| InputError(format!("{}: {msg}", path.display()));
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| input(format!("column '{name}' missing from the header (line 1)")))
    };
    let vars = file.roles.variables();
    let var_cols = vars.iter().map(|v| find(v)).collect::<Result<Vec<_>, _>>()?;
    let y_col = find("y")?;
    let strata_col = file.roles.strata.as_ref().map(|s| find(&s.name)).transpose()?;
    let index: HashMap<&str, usize> = vars.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();

    let mut blocks: Vec<Block> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let num = |c: usize| -> anyhow::Result<f64> {
            let v = rec.get(c).unwrap_or("").trim();
            v.parse::<f64>()
                .map_err(|_| input(format!("line {line}: column '{}' has non-numeric value '{v}'", header[c])).into())
        };
        let values = var_cols.iter().map(|&c| num(c)).collect::<anyhow::Result<Vec<f64>>>()?;
        let y = num(y_col)?;
        let label = strata_col.map(|c| rec.get(c).unwrap_or("").trim().to_string());
        let same = blocks
            .last()
            .is_some_and(|b| b.values == values && b.stratum_label == label);
        if same {
            let b = blocks.last_mut().expect("checked");
            if y <= *b.query.y.last().expect("non-empty block") {
                return Err(input(format!("line {line}: y must increase within a block")).into());
            }
            b.query.y.push(y);
            continue;
        }
        let stratum = match &label {
            None => 0,
            Some(l) => levels
                .iter()
                .position(|s| s == l)
                .ok_or_else(|| input(format!("line {line}: unknown stratum '{l}'")))?,
        };
        let x = file.roles.fixed.iter().map(|t| term(&t.name, &index, &values)).collect();
        let u = file.roles.random.iter().map(|t| term(&t.name, &index, &values)).collect();
        let mut query = MarginalQuery::new(x, u, vec![y]);
        query.stratum = stratum;
        blocks.push(Block {
            values,
            stratum_label: label,
            query,
        });
    }
    if blocks.is_empty() {
        return Err(input("no query rows".into()).into());
    }
    Ok(blocks)
}

/// Columns: block, covariates, [stratum], y, cdf, effect_scale.
pub fn write_marginal(
    path: &Path,
    spec: &ModelSpec,
    params: &ParameterVector,
    blocks: &[Block],
    file: &SpecFile,
) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    let mut header = vec!["block".to_string()];
    header.extend(file.roles.variables());
    if let Some(s) = &file.roles.strata {
        header.push(s.name.clone());
    }
    header.extend(["y", "cdf", "effect_scale"].map(String::from));
    w.write_record(&header)?;
    for (b, block) in blocks.iter().enumerate() {
        let cdf = marginal_cdf(spec, params, &block.query)?;
        let scale = marginal_effect_scale(params, &block.query.u)?;
        for (y, p) in block.query.y.iter().zip(&cdf) {
            let mut rec = vec![(b + 1).to_string()];
            rec.extend(block.values.iter().map(|v| fmt17(*v)));
            if let Some(l) = &block.stratum_label {
                rec.push(l.clone());
            }
            rec.extend([fmt17(*y), fmt17(*p), fmt17(scale)]);
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
