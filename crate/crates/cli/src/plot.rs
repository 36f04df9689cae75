use std::path::Path;

use anyhow::Result;
use plotters::prelude::*;

use stepnav::geometry::{Environment, Obstacle, Vec2};
use stepnav::io;
use stepnav::lip::LipParams;
use stepnav::sim::{step_velocity, EpisodeTrace};
use stepnav::train::CurveRow;

const WINDOW: usize = 50;

fn outline(o: &Obstacle) -> Vec<(f64, f64)> {
    let ring = |c: Vec2, a: f64, b: f64, rot: f64| {
        (0..48)
            .map(|i| {
                let t = i as f64 / 48.0 * std::f64::consts::TAU;
                let (x, y) = (a * t.cos(), b * t.sin());
                (c.x + x * rot.cos() - y * rot.sin(), c.y + x * rot.sin() + y * rot.cos())
            })
            .collect()
    };
    match o {
        Obstacle::Circle { center, radius } => ring(*center, *radius, *radius, 0.0),
        Obstacle::Ellipse {
            center,
            semi_axes,
            rotation,
        } => ring(*center, semi_axes.x, semi_axes.y, *rotation),
        Obstacle::Polygon { vertices } => vertices.iter().map(|v| (v.x, v.y)).collect(),
    }
}

struct Series {
    t: Vec<f64>,
    com: Vec<(f64, f64)>,
    feet: Vec<(f64, f64)>,
    forward: Vec<f64>,
    omega: Vec<f64>,
    reward: Vec<f64>,
}

fn series(trace: &EpisodeTrace, lip: &LipParams) -> Series {
    let mut s = Series {
        t: Vec::new(),
        com: Vec::new(),
        feet: Vec::new(),
        forward: Vec::new(),
        omega: Vec::new(),
        reward: Vec::new(),
    };
    for r in &trace.steps {
        let c = r.state.com();
        s.t.push(r.step as f64 * lip.step_duration);
        s.com.push((c.x, c.y));
        s.feet.push((r.state.stance_foot.x, r.state.stance_foot.y));
        s.forward.push(step_velocity(&r.state, &r.next_state, r.control.as_ref(), lip)[0]);
        s.omega.push(r.control.map_or(0.0, |u| u.omega));
        s.reward.push(r.reward.total);
    }
    if let Some(last) = trace.steps.last() {
        let c = last.next_state.com();
        s.com.push((c.x, c.y));
    }
    s
}

fn span(values: impl Iterator<Item = f64>, pad: f64) -> std::ops::Range<f64> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return -1.0..1.0;
    }
    (lo - pad)..(hi + pad).max(lo - pad + 1e-6)
}

fn draw_trace(trace: &EpisodeTrace, env: Option<&Environment>, lip: &LipParams, path: &Path) -> Result<()> {
    let s = series(trace, lip);
    let root = SVGBackend::new(path, (1100, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let (left, right) = root.split_horizontally(550);

    let mut xs: Vec<f64> = s.com.iter().map(|p| p.0).collect();
    let mut ys: Vec<f64> = s.com.iter().map(|p| p.1).collect();
    if let Some(e) = env {
        xs.extend([e.bounds.min.x, e.bounds.max.x]);
        ys.extend([e.bounds.min.y, e.bounds.max.y]);
    }
    let mut chart = ChartBuilder::on(&left)
        .caption(format!("{} env {} ({:?})", trace.method, trace.env_id, trace.outcome), ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(span(xs.into_iter(), 0.5), span(ys.into_iter(), 0.5))?;
    chart.configure_mesh().x_desc("x [m]").y_desc("y [m]").draw()?;
    if let Some(e) = env {
        chart.draw_series(e.obstacles.iter().map(|o| Polygon::new(outline(o), RGBColor(120, 120, 120).mix(0.6).filled())))?;
        chart.draw_series(std::iter::once(Circle::new((e.goal.x, e.goal.y), 6, GREEN.filled())))?;
        chart.draw_series(std::iter::once(Circle::new((e.start.x, e.start.y), 4, BLACK.filled())))?;
    }
    chart.draw_series(LineSeries::new(s.com.iter().copied(), &BLUE))?.label("CoM").legend(|(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], BLUE));
    chart
        .draw_series(s.feet.iter().map(|p| Circle::new(*p, 2, RED.filled())))?
        .label("footsteps")
        .legend(|(x, y)| Circle::new((x + 7, y), 2, RED.filled()));
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw()?;

    let (top, bottom) = right.split_vertically(250);
    let tmax = s.t.last().copied().unwrap_or(0.0) + lip.step_duration;
    for (area, name, values, color) in [(&top, "forward velocity [m/s]", &s.forward, BLUE), (&bottom, "turning rate [rad/s]", &s.omega, RED)] {
        let mut c = ChartBuilder::on(area)
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(45)
            .build_cartesian_2d(0.0..tmax, span(values.iter().copied(), 0.1))?;
        c.configure_mesh().x_desc("t [s]").y_desc(name).draw()?;
        c.draw_series(LineSeries::new(s.t.iter().copied().zip(values.iter().copied()), &color))?;
    }
    root.present()?;
    Ok(())
}

fn write_series(trace: &EpisodeTrace, lip: &LipParams, path: &Path) -> Result<()> {
    let s = series(trace, lip);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "com_x", "com_y", "foot_x", "foot_y", "v_forward", "omega", "reward"])?;
    for i in 0..s.t.len() {
        w.serialize((s.t[i], s.com[i].0, s.com[i].1, s.feet[i].0, s.feet[i].1, s.forward[i], s.omega[i], s.reward[i]))?;
    }
    io::write_atomic(path, &w.into_inner()?)?;
    Ok(())
}

/// One SVG and one CSV per trace; returns how many traces were drawn.
pub fn traces(file: &Path, envs: Option<&[Environment]>, out: &Path) -> Result<usize> {
    let (_, traces) = io::read_traces(file)?;
    std::fs::create_dir_all(out)?;
    let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let lip = LipParams::default();
    for (i, t) in traces.iter().enumerate() {
        let env = envs.and_then(|es| es.iter().find(|e| e.id == t.env_id));
        let base = format!("{stem}-{i:03}-env{}", t.env_id);
        draw_trace(t, env, &lip, &out.join(format!("{base}.svg")))?;
        write_series(t, &lip, &out.join(format!("{base}.csv")))?;
    }
    Ok(traces.len())
}

fn rolling(v: &[f64]) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let w = &v[(i + 1).saturating_sub(WINDOW)..=i];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect()
}

/// `curves.svg` plus the smoothed series as `curves-rolling.csv`.
pub fn curves(file: &Path, out: &Path) -> Result<()> {
    let (_, rows): (_, Vec<CurveRow>) = io::read_curves(file)?;
    std::fs::create_dir_all(out)?;
    let ret: Vec<f64> = rows.iter().map(|r| r.episode_return).collect();
    let succ: Vec<f64> = rows.iter().map(|r| if r.success { 100.0 } else { 0.0 }).collect();
    let ret_avg = rolling(&ret);
    let succ_avg = rolling(&succ);
    let n = rows.len().max(1) as f64;

    let path = out.join("curves.svg");
    let root = SVGBackend::new(&path, (900, 600)).into_drawing_area();
    root.fill(&WHITE)?;
    let (top, bottom) = root.split_vertically(300);
    let mut c = ChartBuilder::on(&top)
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..n, span(ret.iter().copied(), 1.0))?;
    c.configure_mesh().y_desc("episode return").draw()?;
    c.draw_series(LineSeries::new(ret.iter().enumerate().map(|(i, v)| (i as f64, *v)), BLUE.mix(0.25)))?;
    c.draw_series(LineSeries::new(ret_avg.iter().enumerate().map(|(i, v)| (i as f64, *v)), &BLUE))?;
    let mut c = ChartBuilder::on(&bottom)
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..n, 0.0..100.0)?;
    c.configure_mesh().x_desc("episode").y_desc("success % (rolling)").draw()?;
    c.draw_series(LineSeries::new(succ_avg.iter().enumerate().map(|(i, v)| (i as f64, *v)), &GREEN))?;
    c.draw_series(LineSeries::new(rows.iter().map(|r| (r.episode as f64, 100.0 * r.demo_fraction)), &RED))?;
    root.present()?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["episode", "return_rolling", "success_rolling", "demo_fraction"])?;
    for (i, r) in rows.iter().enumerate() {
        w.serialize((r.episode, ret_avg[i], succ_avg[i], r.demo_fraction))?;
    }
    io::write_atomic(&out.join("curves-rolling.csv"), &w.into_inner()?)?;
    Ok(())
}
