use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mpcn::error::{MpcnError, Result};

/// One report's contribution to the shots figure.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotPoint {
    pub series: String,
    pub shots: usize,
    pub mean_iou: f64,
}

/// Pulls `config.shots`, `config.ablation`, and `overall_iou` out of a
/// key-value report. Every missing or unparseable field is reported with its
/// file so a batch of bad reports fails with one itemized message.
pub fn parse_reports(paths: &[impl AsRef<Path>]) -> Result<Vec<ShotPoint>> {
    let mut points = Vec::new();
    let mut problems = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                problems.push(format!("{}: {e}", path.display()));
                continue;
            }
        };
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for line in text.lines() {
            if let Some((key, value)) = line.split_once('=') {
                fields.entry(key).or_insert(value);
            }
        }
        let mut missing = Vec::new();
        let shots = match fields.get("config.shots").map(|v| v.parse::<usize>()) {
            Some(Ok(s)) => Some(s),
            Some(Err(_)) => {
                missing.push("config.shots (not an integer)");
                None
            }
            None => {
                missing.push("config.shots");
                None
            }
        };
        let iou = match fields.get("overall_iou").map(|v| v.parse::<f64>()) {
            Some(Ok(v)) => Some(v),
            Some(Err(_)) => {
                missing.push("overall_iou (not a number)");
                None
            }
            None => {
                missing.push("overall_iou");
                None
            }
        };
        let ablation = match fields.get("config.ablation") {
            Some(v) => Some(*v),
            None => {
                missing.push("config.ablation");
                None
            }
        };
        if !missing.is_empty() {
            problems.push(format!("{}: missing {}", path.display(), missing.join(", ")));
            continue;
        }
        let ablation = ablation.unwrap();
        let series = if ablation == "none" { "mpcn".to_string() } else { ablation.to_string() };
        points.push(ShotPoint {
            series,
            shots: shots.unwrap(),
            mean_iou: iou.unwrap(),
        });
    }
    if !problems.is_empty() {
        return Err(MpcnError::config(format!(
            "unusable reports:\n  {}",
            problems.join("\n  ")
        )));
    }
    Ok(points)
}

pub fn check_plottable(points: &[ShotPoint]) -> Result<()> {
    if points.len() < 2 {
        return Err(MpcnError::config(format!(
            "need at least two reports to plot, got {}",
            points.len()
        )));
    }
    let mut shots: Vec<usize> = points.iter().map(|p| p.shots).collect();
    shots.sort_unstable();
    shots.dedup();
    if shots.len() < 2 {
        return Err(MpcnError::config(
            "reports share a single shot count; the figure needs at least two",
        ));
    }
    let mut seen = BTreeMap::new();
    for p in points {
        if let Some(prev) = seen.insert((p.series.clone(), p.shots), p.mean_iou) {
            return Err(MpcnError::config(format!(
                "two reports give series {} at {} shots (iou {} and {})",
                p.series, p.shots, prev, p.mean_iou
            )));
        }
    }
    Ok(())
}

/// Exact values behind the figure, one row per point.
pub fn sidecar_csv(points: &[ShotPoint]) -> String {
    let mut rows: Vec<&ShotPoint> = points.iter().collect();
    rows.sort_by(|a, b| a.series.cmp(&b.series).then(a.shots.cmp(&b.shots)));
    let mut out = String::from("series,shots,mean_iou\n");
    for p in rows {
        out.push_str(&format!("{},{},{}\n", p.series, p.shots, p.mean_iou));
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 50.0;

/// Mean IoU against shot count, one polyline per series. Values are drawn
/// as-is; the sidecar CSV carries the numbers for exact comparison.
pub fn render_svg(points: &[ShotPoint]) -> String {
    let mut shot_values: Vec<usize> = points.iter().map(|p| p.shots).collect();
    shot_values.sort_unstable();
    shot_values.dedup();
    let x_min = *shot_values.first().unwrap() as f64;
    let x_max = *shot_values.last().unwrap() as f64;
    let x_span = (x_max - x_min).max(1.0);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let x_of = |shots: f64| MARGIN_LEFT + (shots - x_min) / x_span * plot_w;
    let y_of = |iou: f64| MARGIN_TOP + (1.0 - iou) * plot_h;

    let mut series: BTreeMap<&str, Vec<&ShotPoint>> = BTreeMap::new();
    for p in points {
        series.entry(&p.series).or_default().push(p);
    }

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    for i in 0..=4 {
        let iou = i as f64 / 4.0;
        let y = y_of(iou);
        svg.push_str(&format!(
            "<line x1=\"{MARGIN_LEFT}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"#dddddd\"/>\n",
            MARGIN_LEFT + plot_w
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"end\">{iou:.2}</text>\n",
            MARGIN_LEFT - 8.0,
            y + 4.0
        ));
    }
    for &shots in &shot_values {
        let x = x_of(shots as f64);
        svg.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{MARGIN_TOP}\" x2=\"{x:.1}\" y2=\"{:.1}\" \
             stroke=\"#dddddd\"/>\n",
            MARGIN_TOP + plot_h
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{shots}</text>\n",
            MARGIN_TOP + plot_h + 18.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">shots</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {:.1})\">mean IoU</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    ));

    for (idx, (name, mut pts)) in series.into_iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        pts.sort_by_key(|p| p.shots);
        let path: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.1},{:.1}", x_of(p.shots as f64), y_of(p.mean_iou)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        for p in &pts {
            svg.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3.5\" fill=\"{color}\"/>\n",
                x_of(p.shots as f64),
                y_of(p.mean_iou)
            ));
        }
        let legend_y = MARGIN_TOP + 10.0 + idx as f64 * 18.0;
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{legend_y:.1}\" x2=\"{:.1}\" y2=\"{legend_y:.1}\" \
             stroke=\"{color}\" stroke-width=\"2\"/>\n",
            WIDTH - MARGIN_RIGHT + 10.0,
            WIDTH - MARGIN_RIGHT + 34.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{name}</text>\n",
            WIDTH - MARGIN_RIGHT + 40.0,
            legend_y + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(series: &str, shots: usize, iou: f64) -> ShotPoint {
        ShotPoint {
            series: series.into(),
            shots,
            mean_iou: iou,
        }
    }

    #[test]
    fn sidecar_rows_sorted_and_exact() {
        let pts = vec![
            point("mpcn", 10, 0.512345678901234),
            point("mpcn", 1, 0.25),
            point("no-prior", 10, 0.4),
        ];
        let csv = sidecar_csv(&pts);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "series,shots,mean_iou");
        assert_eq!(lines[1], "mpcn,1,0.25");
        assert_eq!(lines[2], "mpcn,10,0.512345678901234");
        assert_eq!(lines[3], "no-prior,10,0.4");
        let back: f64 = lines[2].rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(back, 0.512345678901234);
    }

    #[test]
    fn plottable_requires_two_distinct_shot_counts() {
        let same = vec![point("a", 5, 0.1), point("b", 5, 0.2)];
        assert!(check_plottable(&same).is_err());
        let ok = vec![point("a", 5, 0.1), point("a", 10, 0.2)];
        assert!(check_plottable(&ok).is_ok());
        assert!(check_plottable(&[point("a", 5, 0.1)]).is_err());
    }

    #[test]
    fn duplicate_series_shot_pairs_rejected() {
        let dup = vec![point("a", 5, 0.1), point("a", 5, 0.2), point("a", 1, 0.0)];
        let err = check_plottable(&dup).unwrap_err().to_string();
        assert!(err.contains("series a at 5 shots"), "{err}");
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let pts = vec![
            point("mpcn", 1, 0.3),
            point("mpcn", 10, 0.5),
            point("no-prior", 1, 0.2),
            point("no-prior", 10, 0.3),
        ];
        let svg = render_svg(&pts);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 4);
        assert!(svg.contains(">mpcn</text>"));
        assert!(svg.contains(">no-prior</text>"));

        let single = render_svg(&[point("mpcn", 1, 0.3), point("mpcn", 10, 0.5)]);
        assert_eq!(single.matches("<polyline").count(), 1);
    }
}
