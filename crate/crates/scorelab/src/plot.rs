//! Minimal SVG line charts for report CSVs. No interactivity; one
//! polyline per metric with axis ticks and labels.

use crate::error::{Error, Result};
use std::collections::BTreeMap;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 64.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// Parse a CSV written by this tool and render `value` against the chosen
/// x column, one series per metric.
pub fn render_csv(csv: &str, x_column: &str, log_log: bool) -> Result<String> {
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Usage("empty csv".into()))?;
    let columns: Vec<&str> = header.split(',').collect();
    let find = |name: &str| -> Result<usize> {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Usage(format!("csv has no column {name}")))
    };
    let xi = find(x_column)?;
    let vi = find("value")?;
    let mi = find("metric")?;
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            continue;
        }
        let (Ok(x), Ok(y)) = (fields[xi].parse::<f64>(), fields[vi].parse::<f64>()) else {
            continue;
        };
        series.entry(fields[mi].to_string()).or_default().push((x, y));
    }
    if series.is_empty() {
        return Err(Error::Usage("no plottable rows".into()));
    }
    let named: Vec<(String, Vec<(f64, f64)>)> = series.into_iter().collect();
    render_line_chart(&named, x_column, "value", log_log)
}

pub fn render_line_chart(
    series: &[(String, Vec<(f64, f64)>)],
    x_label: &str,
    y_label: &str,
    log_log: bool,
) -> Result<String> {
    let transform = |v: f64| -> Option<f64> {
        if log_log {
            (v > 0.0).then(|| v.ln())
        } else {
            Some(v)
        }
    };
    let mut pts: Vec<(usize, Vec<(f64, f64)>)> = Vec::new();
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for (si, (_, raw)) in series.iter().enumerate() {
        let mut mapped: Vec<(f64, f64)> = raw
            .iter()
            .filter_map(|&(x, y)| Some((transform(x)?, transform(y)?)))
            .collect();
        mapped.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for &(x, y) in &mapped {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        if !mapped.is_empty() {
            pts.push((si, mapped));
        }
    }
    if pts.is_empty() || !xmin.is_finite() || !ymin.is_finite() {
        return Err(Error::Usage("nothing to plot after filtering".into()));
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        ymax = ymin + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - xmin) / (xmax - xmin) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - ymin) / (ymax - ymin) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // axes
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    ));
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN
    ));
    // ticks
    for i in 0..=4 {
        let fx = xmin + (xmax - xmin) * i as f64 / 4.0;
        let fy = ymin + (ymax - ymin) * i as f64 / 4.0;
        let label_x = if log_log { fx.exp() } else { fx };
        let label_y = if log_log { fy.exp() } else { fy };
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{b}\" x2=\"{x}\" y2=\"{b2}\" stroke=\"black\"/><text x=\"{x}\" y=\"{ty}\" font-size=\"11\" text-anchor=\"middle\">{label_x:.3e}</text>\n",
            x = sx(fx),
            b = HEIGHT - MARGIN,
            b2 = HEIGHT - MARGIN + 6.0,
            ty = HEIGHT - MARGIN + 20.0,
        ));
        svg.push_str(&format!(
            "<line x1=\"{m2}\" y1=\"{y}\" x2=\"{m}\" y2=\"{y}\" stroke=\"black\"/><text x=\"{tx}\" y=\"{y}\" font-size=\"11\" text-anchor=\"end\">{label_y:.3e}</text>\n",
            m = MARGIN,
            m2 = MARGIN - 6.0,
            y = sy(fy),
            tx = MARGIN - 10.0,
        ));
    }
    // axis labels
    svg.push_str(&format!(
        "<text x=\"{x}\" y=\"{y}\" font-size=\"13\" text-anchor=\"middle\">{x_label}{}</text>\n",
        if log_log { " (log)" } else { "" },
        x = WIDTH / 2.0,
        y = HEIGHT - 16.0,
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{y}\" font-size=\"13\" transform=\"rotate(-90 16 {y})\" text-anchor=\"middle\">{y_label}{}</text>\n",
        if log_log { " (log)" } else { "" },
        y = HEIGHT / 2.0,
    ));
    // series
    for (si, mapped) in &pts {
        let color = PALETTE[si % PALETTE.len()];
        let path: Vec<String> = mapped
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        for &(x, y) in mapped {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{y}\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            series[*si].0,
            x = WIDTH - MARGIN + 4.0,
            y = MARGIN + 16.0 * *si as f64,
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_csv_to_svg() {
        let csv = "experiment-id,target,process,d,T,N,h,eps_sc,metric,value,se,rhs,pass\n\
                   e,iso,ddpm,1,10,50,0.2,0,exact_tv,0.1,0,1,true\n\
                   e,iso,ddpm,1,10,100,0.1,0,exact_tv,0.05,0,1,true\n\
                   e,iso,ddpm,1,10,200,0.05,0,exact_tv,0.025,0,1,true\n";
        let svg = render_csv(csv, "h", true).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn rejects_missing_column() {
        assert!(render_csv("a,b\n1,2\n", "h", false).is_err());
    }
}
