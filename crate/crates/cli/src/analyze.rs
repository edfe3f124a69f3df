//! `speccond analyze`: conditioning of supplied matrices before and after correction.

use serde::Serialize;

use speccond::attention::{AttentionParams, Projection};
use speccond::bounds::{evaluate_bound, BoundReport};
use speccond::conditioning::{build_correction_set, Conditioning, ShiftPrecondition};
use speccond::linalg::{spectral_record, RecordTag, SpectralRecord};
use speccond::report::fmt_f64;
use speccond::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Serialize)]
struct Stage {
    records: Vec<SpectralRecord>,
    /// `None` when the bound needs more than one token.
    bound: Option<BoundReport>,
}

#[derive(Debug, Serialize)]
struct Analysis {
    conditioning: Conditioning,
    input: SpectralRecord,
    before: Stage,
    after: Stage,
    correction_norms: [f64; 3],
    shift_preconditions: Vec<(Projection, ShiftPrecondition)>,
}

fn stage(x: &speccond::linalg::Matrix, p: &AttentionParams, label: &str) -> Result<Stage> {
    let records = Projection::ALL
        .iter()
        .map(|&w| spectral_record(p.get(w), RecordTag::named(format!("{label}.w_{}", w.letter()))))
        .collect::<Result<Vec<_>>>()?;
    let bound = if x.rows() >= 2 {
        Some(evaluate_bound(x, p, RecordTag::named(format!("{label}.jacobian")))?)
    } else {
        None
    };
    Ok(Stage { records, bound })
}

pub fn run(
    p: &AttentionParams,
    x: &speccond::linalg::Matrix,
    conditioning: Conditioning,
    format: Format,
) -> Result<String> {
    if x.cols() != p.d_model() {
        return Err(Error::Dimension(format!(
            "x has {} columns but the projections have {} rows",
            x.cols(),
            p.d_model()
        )));
    }
    let input = spectral_record(x, RecordTag::named("x"))?;
    let before = stage(x, p, "before")?;
    let (corrected, correction_norms, shift_preconditions) = match conditioning.correction_mode() {
        None => (p.clone(), [0.0; 3], Vec::new()),
        Some(mode) => {
            let cs = build_correction_set(p, mode)?;
            let norms = [cs.c_q(), cs.c_k(), cs.c_v()].map(|c| c.frobenius_norm());
            (p.corrected(&cs)?, norms, cs.diagnostics().to_vec())
        }
    };
    let after = stage(x, &corrected, "after")?;
    let analysis = Analysis {
        conditioning,
        input,
        before,
        after,
        correction_norms,
        shift_preconditions,
    };
    match format {
        Format::Json => Ok(serde_json::to_string_pretty(&analysis)? + "\n"),
        Format::Csv => Ok(to_csv(&analysis)),
    }
}

fn to_csv(a: &Analysis) -> String {
    let mut s = String::from(
        "stage,quantity,sigma_min,sigma_max,kappa,kappa_effective,numerical_rank,bound_value,bound_holds\n",
    );
    let mut record = |stage: &str, r: &SpectralRecord| {
        s.push_str(&format!(
            "{stage},{},{},{},{},{},{},,\n",
            r.tag.name,
            fmt_f64(r.sigma_min),
            fmt_f64(r.sigma_max),
            fmt_f64(r.kappa),
            fmt_f64(r.kappa_effective),
            r.numerical_rank
        ));
    };
    record("input", &a.input);
    for (label, st) in [("before", &a.before), ("after", &a.after)] {
        st.records.iter().for_each(|r| record(label, r));
    }
    for (label, st) in [("before", &a.before), ("after", &a.after)] {
        if let Some(b) = &st.bound {
            let holds = b.bound_holds.map_or("", |h| if h { "true" } else { "false" });
            s.push_str(&format!(
                "{label},jacobian,,,{},{},{},{},{holds}\n",
                fmt_f64(b.kappa_j),
                fmt_f64(b.kappa_j_effective),
                b.jacobian_rank,
                fmt_f64(b.bound_value)
            ));
        }
    }
    s
}
