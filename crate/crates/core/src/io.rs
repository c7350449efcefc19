//! Text formats for streams, parameters, logs and reports.
//!
//! Reals are written in scientific notation with 17 significant digits, so
//! every `f64` (and `f32`) reads back to the identical value. CSV files use
//! `,` as separator and LF line endings.

use std::io::{self, BufRead, Write};

use crate::distill::DistilledUnknown;
use crate::error::{Error, Result};
use crate::metrics::{Histogram, MetricsReport};
use crate::model::{Activation, Matrix, ModelParams};
use crate::scalar::Scalar;
use crate::sim::{BoundingBox, FrameProposals, ObjectProposal, Truth, Video};
use crate::train::TrainLog;

/// 17 significant digits.
pub fn fmt_real<S: Scalar>(x: S) -> String {
    format!("{x:.16e}")
}

fn join<S: Scalar>(xs: &[S]) -> String {
    xs.iter().map(|&x| fmt_real(x)).collect::<Vec<_>>().join(",")
}

struct LineParser<'a> {
    source: &'a str,
    line: usize,
}

impl LineParser<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            source_name: self.source.to_string(),
            line: self.line,
            message: message.into(),
        }
    }

    fn real<S: Scalar>(&self, s: &str) -> Result<S> {
        s.trim()
            .parse::<S>()
            .map_err(|_| self.err(format!("invalid real {s:?}")))
    }

    fn reals<S: Scalar>(&self, s: &str) -> Result<Vec<S>> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|x| self.real(x)).collect()
    }

    fn count(&self, s: &str) -> Result<usize> {
        s.trim().parse().map_err(|_| self.err(format!("invalid count {s:?}")))
    }
}

fn read_err(source: &str) -> impl Fn(io::Error) -> Error + '_ {
    move |e| Error::io(source, e)
}

// ---------------------------------------------------------------------------
// proposal streams

pub const STREAM_HEADER: &str = "video_id\tframe_index\tbox\tobjectness\ttruth\tfeature";

fn fmt_truth(t: Truth) -> String {
    match t {
        Truth::Id(k) => format!("id:{k}"),
        Truth::Ood => "ood".to_string(),
    }
}

/// One tab-separated record per proposal.
pub fn write_stream<S: Scalar, W: Write>(mut w: W, videos: &[Video<S>]) -> io::Result<()> {
    writeln!(w, "{STREAM_HEADER}")?;
    for (v, video) in videos.iter().enumerate() {
        for frame in video {
            for p in &frame.proposals {
                let b = &p.bbox;
                writeln!(
                    w,
                    "{v}\t{}\t{}\t{}\t{}\t{}",
                    frame.frame_index,
                    join(&[b.x1, b.y1, b.x2, b.y2]),
                    fmt_real(p.objectness),
                    fmt_truth(p.truth),
                    join(&p.feature)
                )?;
            }
        }
    }
    Ok(())
}

/// Reads a stream written by [`write_stream`]. Records must be grouped by
/// video and frame, in increasing order.
pub fn read_stream<S: Scalar, R: BufRead>(r: R, source: &str) -> Result<Vec<Video<S>>> {
    let mut videos: Vec<Video<S>> = Vec::new();
    let mut lines = r.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).transpose().map_err(read_err(source))?;
    if header.as_deref().map(str::trim_end) != Some(STREAM_HEADER) {
        return Err(Error::Parse {
            source_name: source.into(),
            line: 1,
            message: "missing stream header".into(),
        });
    }
    for (i, line) in lines {
        let line = line.map_err(read_err(source))?;
        if line.is_empty() {
            continue;
        }
        let p = LineParser { source, line: i + 1 };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(p.err(format!("expected 6 fields, found {}", fields.len())));
        }
        let video_id = p.count(fields[0])?;
        let frame_index = p.count(fields[1])?;
        let b: Vec<S> = p.reals(fields[2])?;
        if b.len() != 4 {
            return Err(p.err("box needs 4 coordinates"));
        }
        let truth = match fields[4] {
            "ood" => Truth::Ood,
            t => match t.strip_prefix("id:") {
                Some(k) => Truth::Id(p.count(k)?),
                None => return Err(p.err(format!("invalid truth tag {t:?}"))),
            },
        };
        let proposal = ObjectProposal {
            feature: p.reals(fields[5])?,
            bbox: BoundingBox {
                x1: b[0],
                y1: b[1],
                x2: b[2],
                y2: b[3],
            },
            objectness: p.real(fields[3])?,
            truth,
        };

        if video_id == videos.len() {
            videos.push(Vec::new());
        } else if video_id + 1 != videos.len() {
            return Err(p.err(format!("video {video_id} out of order")));
        }
        let video = videos.last_mut().expect("video pushed above");
        match video.last_mut() {
            Some(frame) if frame.frame_index == frame_index => frame.proposals.push(proposal),
            Some(frame) if frame.frame_index > frame_index => {
                return Err(p.err(format!("frame index {frame_index} not increasing")));
            }
            _ => video.push(FrameProposals {
                frame_index,
                proposals: vec![proposal],
            }),
        }
    }
    Ok(videos)
}

// ---------------------------------------------------------------------------
// parameters

const PARAMS_MAGIC: &str = "stud-params 1";

/// One line per tensor: `name<TAB>rowsxcols<TAB>v,v,...`.
pub fn write_params<S: Scalar, W: Write>(mut w: W, params: &ModelParams<S>) -> io::Result<()> {
    writeln!(w, "{PARAMS_MAGIC}\tactivation={}", params.activation.name())?;
    for t in params.tensors() {
        writeln!(w, "{}\t{}x{}\t{}", t.name, t.shape[0], t.shape[1], join(t.values))?;
    }
    Ok(())
}

pub fn read_params<S: Scalar, R: BufRead>(r: R, source: &str) -> Result<ModelParams<S>> {
    let mut lines = r.lines();
    let first = lines.next().transpose().map_err(read_err(source))?.unwrap_or_default();
    let header = LineParser { source, line: 1 };
    let activation = first
        .strip_prefix(PARAMS_MAGIC)
        .and_then(|rest| rest.trim().strip_prefix("activation="))
        .and_then(Activation::from_name)
        .ok_or_else(|| header.err("missing or invalid parameter file header"))?;

    let mut tensors: Vec<(String, [usize; 2], Vec<S>)> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(read_err(source))?;
        if line.is_empty() {
            continue;
        }
        let p = LineParser { source, line: i + 2 };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(p.err("expected name, shape and values"));
        }
        let (rows, cols) = fields[1]
            .split_once('x')
            .ok_or_else(|| p.err("shape must be ROWSxCOLS"))?;
        let shape = [p.count(rows)?, p.count(cols)?];
        let values = p.reals(fields[2])?;
        if values.len() != shape[0] * shape[1] {
            return Err(p.err(format!(
                "{} values do not fill shape {}x{}",
                values.len(),
                shape[0],
                shape[1]
            )));
        }
        tensors.push((fields[0].to_string(), shape, values));
    }

    let names: Vec<&str> = tensors.iter().map(|t| t.0.as_str()).collect();
    if names != crate::model::TENSOR_NAMES {
        return Err(Error::Parse {
            source_name: source.into(),
            line: 0,
            message: format!("expected tensors {:?}, found {names:?}", crate::model::TENSOR_NAMES),
        });
    }
    let mut it = tensors.into_iter().map(|(_, s, v)| (s, v));
    let mut next = || {
        let (s, v) = it.next().expect("names checked");
        Matrix::from_vec(s[0], s[1], v).expect("length checked")
    };
    let (enc_w1, enc_b1, enc_w2, enc_b2) = (next(), next(), next(), next());
    let (head_w, head_b, theta) = (next(), next(), next());
    let params = ModelParams {
        activation,
        enc_b1: enc_b1.as_slice().to_vec(),
        enc_b2: enc_b2.as_slice().to_vec(),
        head_b: head_b.as_slice().to_vec(),
        theta_u: theta.as_slice()[0],
        enc_w1,
        enc_w2,
        head_w,
    };
    let d = params.dims();
    let consistent = params.enc_b1.len() == d.enc_dim
        && params.enc_w2.rows() == d.enc_dim
        && params.enc_w2.cols() == d.enc_dim
        && params.enc_b2.len() == d.enc_dim
        && params.head_w.cols() == d.feature_dim
        && params.head_b.len() == d.num_classes;
    if !consistent {
        return Err(Error::Parse {
            source_name: source.into(),
            line: 0,
            message: "tensor shapes are inconsistent".into(),
        });
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// training log and reports

pub const TRAIN_LOG_HEADER: &str = "step,loss_det,loss_unc,mean_E_id,mean_E_unknown,theta_u";

pub fn write_train_log<S: Scalar, W: Write>(mut w: W, log: &TrainLog<S>) -> io::Result<()> {
    writeln!(w, "{TRAIN_LOG_HEADER}")?;
    for r in &log.records {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.step,
            fmt_real(r.loss_det),
            fmt_real(r.loss_unc),
            fmt_real(r.mean_energy_id),
            fmt_real(r.mean_energy_unknown),
            fmt_real(r.theta_u)
        )?;
    }
    Ok(())
}

/// `key: value` summary of a metrics report.
pub fn write_metrics_report<S: Scalar, W: Write>(mut w: W, report: &MetricsReport<S>) -> io::Result<()> {
    writeln!(w, "method: {}", report.method)?;
    writeln!(w, "n_id: {}", report.n_id)?;
    writeln!(w, "n_ood: {}", report.n_ood)?;
    writeln!(w, "tpr_target: {}", report.tpr_target)?;
    writeln!(w, "gamma: {}", fmt_real(report.gamma))?;
    writeln!(w, "fpr95: {}", fmt_real(report.fpr95))?;
    writeln!(w, "auroc: {}", fmt_real(report.auroc))?;
    Ok(())
}

pub fn write_scores_csv<S: Scalar, W: Write>(mut w: W, report: &MetricsReport<S>) -> io::Result<()> {
    writeln!(w, "score,truth,energy")?;
    for o in &report.objects {
        let truth = if o.truth.is_id() { "id" } else { "ood" };
        writeln!(w, "{},{truth},{}", fmt_real(o.score), fmt_real(o.energy))?;
    }
    Ok(())
}

pub fn write_histogram_csv<W: Write>(mut w: W, histogram: &Histogram) -> io::Result<()> {
    writeln!(w, "bin_left,bin_right,count_id,count_ood")?;
    for b in &histogram.bins {
        writeln!(
            w,
            "{},{},{},{}",
            fmt_real(b.left),
            fmt_real(b.right),
            b.count_id,
            b.count_ood
        )?;
    }
    Ok(())
}

/// Debug dump: one line per distilled unknown with its provenance and weights.
pub fn write_distill_dump<S: Scalar, W: Write>(
    mut w: W,
    key_frame: usize,
    unknowns: &[DistilledUnknown<S>],
) -> io::Result<()> {
    for u in unknowns {
        let provenance = u
            .provenance
            .iter()
            .map(|(f, p)| format!("{f}:{p}"))
            .collect::<Vec<_>>()
            .join(",");
        writeln!(
            w,
            "{key_frame}\t{}\t{provenance}\t{}\t{}",
            u.key_index,
            join(&u.weights),
            join(&u.feature)
        )?;
    }
    Ok(())
}
