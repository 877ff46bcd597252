//! Native SVG rendering of a run: executed path, final plan, keep-out
//! ellipses of the last logged cycle. 2-D scenes render directly; 3-D
//! scenes render three axis-pair projections side by side.
//!
//! All numbers are written with fixed precision so identical runs produce
//! byte-identical files.

use nalgebra::{DMatrix, DVector};
use safely::beliefs::propagate_horizon;
use safely::occupancy::{build_keepouts, L0Policy, RiskBudget};
use safely::sim::RunLog;
use safely::sqp::RobotModel;
use safely::{GaussianBelief, Scenario};

const SCALE: f64 = 80.0;
const MARGIN: f64 = 30.0;
const OBSTACLE_COLORS: [&str; 6] = ["#c0392b", "#d35400", "#8e44ad", "#16a085", "#7f8c8d", "#2c3e50"];

struct Frame {
    min_x: f64,
    max_y: f64,
    ox: f64,
    oy: f64,
}

impl Frame {
    fn new(min_x: f64, max_y: f64, ox: f64, oy: f64) -> Self {
        Self { min_x, max_y, ox, oy }
    }
    fn x(&self, wx: f64) -> f64 {
        self.ox + (wx - self.min_x) * SCALE
    }
    fn y(&self, wy: f64) -> f64 {
        self.oy + (self.max_y - wy) * SCALE
    }
}

fn f(v: f64) -> String {
    format!("{v:.4}")
}

/// 1-sigma style outline of the ellipse `(x-c)' Q^-1 (x-c) = 1` projected
/// onto a coordinate pair (the projection's shape matrix is the 2x2
/// submatrix of Q).
fn ellipse_svg(frame: &Frame, center: (f64, f64), q2: &DMatrix<f64>, color: &str, opacity: f64) -> String {
    let eig = q2.clone().symmetric_eigen();
    let (l0, l1) = (eig.eigenvalues[0].max(0.0), eig.eigenvalues[1].max(0.0));
    let (rx, ry) = (l0.sqrt() * SCALE, l1.sqrt() * SCALE);
    let angle = eig.eigenvectors[(1, 0)].atan2(eig.eigenvectors[(0, 0)]);
    // svg y flips, so the rotation angle flips sign
    let deg = -angle.to_degrees();
    let (cx, cy) = (frame.x(center.0), frame.y(center.1));
    format!(
        "  <ellipse cx=\"{}\" cy=\"{}\" rx=\"{}\" ry=\"{}\" transform=\"rotate({} {} {})\" \
         fill=\"{color}\" fill-opacity=\"{}\" stroke=\"{color}\" stroke-width=\"1\"/>\n",
        f(cx),
        f(cy),
        f(rx.max(0.5)),
        f(ry.max(0.5)),
        f(deg),
        f(cx),
        f(cy),
        f(opacity)
    )
}

fn polyline(frame: &Frame, pts: &[(f64, f64)], color: &str, width: f64, dashed: bool) -> String {
    if pts.is_empty() {
        return String::new();
    }
    let coords: Vec<String> = pts
        .iter()
        .map(|(x, y)| format!("{},{}", f(frame.x(*x)), f(frame.y(*y))))
        .collect();
    let dash = if dashed { " stroke-dasharray=\"6,4\"" } else { "" };
    format!(
        "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\"{dash}/>\n",
        coords.join(" ")
    )
}

/// Render the run into a standalone SVG document.
pub fn render_trajectory(log: &RunLog) -> safely::Result<String> {
    let scenario = Scenario::<f64>::from_value(&log.scenario)?;
    let model = scenario.robot.as_model();
    let n_pos = model.position_dim();
    let (lo, hi) = model.position_bounds();

    // axis pairs to draw: the plane itself, or three projections in 3-D
    let pairs: Vec<(usize, usize, &str)> = if n_pos == 2 {
        vec![(0, 1, "x-y")]
    } else {
        vec![(0, 1, "x-y"), (0, 2, "x-z"), (1, 2, "y-z")]
    };

    // keep-out ellipsoids of the last logged cycle
    let mut keepout_draws: Vec<(usize, DVector<f64>, DMatrix<f64>, f64)> = Vec::new();
    if let Some(last) = log.records.last() {
        let beliefs: Vec<GaussianBelief> = last
            .beliefs
            .iter()
            .map(|b| {
                let n = b.mean.len();
                GaussianBelief::new(
                    DVector::from_fn(n, |i, _| b.mean[i]),
                    DMatrix::from_fn(n, n, |i, j| b.cov[i][j]),
                )
            })
            .collect::<safely::Result<_>>()?;
        if !beliefs.is_empty() {
            let budget = RiskBudget::new(scenario.alpha, scenario.horizon, beliefs.len())?;
            let horizon: Vec<Vec<GaussianBelief>> = beliefs
                .iter()
                .zip(&scenario.obstacles)
                .map(|(b, o)| propagate_horizon(b, &o.model, scenario.horizon))
                .collect::<safely::Result<_>>()?;
            let models: Vec<_> = scenario.obstacles.iter().map(|o| o.model.clone()).collect();
            let grid = build_keepouts(&horizon, &budget, &models, &L0Policy::LeadingEigenvector)?;
            for o in 0..beliefs.len() {
                for (t, opacity) in [(1usize, 0.35), (scenario.horizon, 0.12)] {
                    let e = grid.at(o, t);
                    if !e.vacuous {
                        keepout_draws.push((o, e.center.clone(), e.shape.clone(), opacity));
                    }
                }
            }
        }
    }

    let executed: Vec<DVector<f64>> = log
        .records
        .iter()
        .map(|r| {
            let s = DVector::from_fn(r.executed_state.len(), |i, _| r.executed_state[i]);
            model.position(&s)
        })
        .collect();
    let planned: Vec<DVector<f64>> = log
        .records
        .last()
        .map(|r| {
            r.planned_states
                .iter()
                .map(|x| {
                    let s = DVector::from_fn(x.len(), |i, _| x[i]);
                    model.position(&s)
                })
                .collect()
        })
        .unwrap_or_default();

    let pane_w = |i: usize, j: usize| (hi[i] - lo[i]) * SCALE + 2.0 * MARGIN + ((hi[j] - lo[j]) * 0.0);
    let mut total_w = 0.0;
    let mut total_h: f64 = 0.0;
    for &(i, j, _) in &pairs {
        total_w += pane_w(i, j);
        total_h = total_h.max((hi[j] - lo[j]) * SCALE + 2.0 * MARGIN + 20.0);
    }

    let mut body = String::new();
    let mut offset_x = 0.0;
    for &(i, j, label) in &pairs {
        let frame = Frame::new(lo[i], hi[j], offset_x + MARGIN, MARGIN);
        body.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\">{label}</text>\n",
            f(offset_x + MARGIN),
            f(MARGIN - 10.0)
        ));
        // safe box
        body.push_str(&format!(
            "  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#000000\" stroke-width=\"1.5\"/>\n",
            f(frame.x(lo[i])),
            f(frame.y(hi[j])),
            f((hi[i] - lo[i]) * SCALE),
            f((hi[j] - lo[j]) * SCALE)
        ));
        for (o, center, shape, opacity) in &keepout_draws {
            let q2 = DMatrix::from_row_slice(
                2,
                2,
                &[shape[(i, i)], shape[(i, j)], shape[(j, i)], shape[(j, j)]],
            );
            let color = OBSTACLE_COLORS[o % OBSTACLE_COLORS.len()];
            body.push_str(&ellipse_svg(&frame, (center[i], center[j]), &q2, color, *opacity));
        }
        let path2: Vec<(f64, f64)> = executed.iter().map(|p| (p[i], p[j])).collect();
        body.push_str(&polyline(&frame, &path2, "#000000", 2.0, false));
        let plan2: Vec<(f64, f64)> = planned.iter().map(|p| (p[i], p[j])).collect();
        body.push_str(&polyline(&frame, &plan2, "#2980b9", 1.5, true));
        // start and goal markers
        if let Some(p) = executed.first() {
            body.push_str(&format!(
                "  <circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"#000000\"/>\n",
                f(frame.x(p[i])),
                f(frame.y(p[j]))
            ));
        }
        body.push_str(&format!(
            "  <circle cx=\"{}\" cy=\"{}\" r=\"5\" fill=\"#f1c40f\" stroke=\"#000000\"/>\n",
            f(frame.x(scenario.goal_pos[i])),
            f(frame.y(scenario.goal_pos[j]))
        ));
        offset_x += pane_w(i, j);
    }

    Ok(format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n{body}</svg>\n",
        f(total_w),
        f(total_h),
        f(total_w),
        f(total_h)
    ))
}
