//! SVG figures: training curves and ablation bars.

use plotters::prelude::*;
use refvos::ablation::AblationRow;
use refvos::trainer::EpochRow;

type DrawResult<T> = Result<T, Box<dyn std::error::Error>>;

const SIZE: (u32, u32) = (800, 480);

/// Loss terms (left panel) and validation scores (right panel) per epoch.
pub fn loss_curve_svg(rows: &[EpochRow]) -> DrawResult<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE)?;
        let (left, right) = root.split_horizontally(SIZE.0 / 2);
        let last = rows.last().map_or(1, |r| r.epoch).max(1) as f64;
        let first = rows.first().map_or(1, |r| r.epoch) as f64;
        let x_range = first..last.max(first + 1.0);

        let y_max = rows.iter().map(|r| r.total).fold(0.0, f64::max).max(1e-6) * 1.1;
        let mut chart = ChartBuilder::on(&left)
            .caption("training loss", ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(32)
            .y_label_area_size(48)
            .build_cartesian_2d(x_range.clone(), 0.0..y_max)?;
        chart.configure_mesh().x_desc("epoch").draw()?;
        let series: [(&str, fn(&EpochRow) -> f64, RGBColor); 4] = [
            ("total", |r| r.total, BLACK),
            ("l_cls", |r| r.l_cls, BLUE),
            ("l_seg", |r| r.l_seg, RED),
            ("l_tmp", |r| r.l_tmp, GREEN),
        ];
        for (name, get, color) in series {
            chart
                .draw_series(LineSeries::new(rows.iter().map(|r| (r.epoch as f64, get(r))), color.stroke_width(2)))?
                .label(name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        }
        chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw()?;

        let mut chart = ChartBuilder::on(&right)
            .caption("validation", ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(32)
            .y_label_area_size(48)
            .build_cartesian_2d(x_range, 0.0..1.0)?;
        chart.configure_mesh().x_desc("epoch").draw()?;
        let series: [(&str, fn(&EpochRow) -> f64, RGBColor); 2] =
            [("Mean IoU", |r| r.val_miou, BLUE), ("J&F", |r| r.val_jf, MAGENTA)];
        for (name, get, color) in series {
            chart
                .draw_series(LineSeries::new(rows.iter().map(|r| (r.epoch as f64, get(r))), color.stroke_width(2)))?
                .label(name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        }
        chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw()?;
        root.present()?;
    }
    Ok(svg)
}

/// One bar per variant: validation Mean IoU.
pub fn ablation_svg(rows: &[AblationRow]) -> DrawResult<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE)?;
        let y_max = rows.iter().map(|r| r.val_miou).fold(0.0, f64::max).max(0.05) * 1.15;
        let names: Vec<String> = rows.iter().map(|r| r.variant.clone()).collect();
        let mut chart = ChartBuilder::on(&root)
            .caption("ablation: validation Mean IoU", ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(90)
            .y_label_area_size(52)
            .build_cartesian_2d((0..rows.len()).into_segmented(), 0.0..y_max)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(rows.len())
            .x_label_formatter(&|v| match v {
                SegmentValue::CenterOf(i) => names.get(*i).cloned().unwrap_or_default(),
                _ => String::new(),
            })
            .x_label_style(("sans-serif", 11).into_font().transform(FontTransform::Rotate90))
            .y_desc("Mean IoU")
            .draw()?;
        chart.draw_series(rows.iter().enumerate().map(|(i, r)| {
            let color = if i == 0 { BLUE } else { RGBColor(120, 120, 120) };
            Rectangle::new(
                [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), r.val_miou)],
                color.filled(),
            )
        }))?;
        root.present()?;
    }
    Ok(svg)
}
