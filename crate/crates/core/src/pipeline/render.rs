//! SVG rendering of a workspace and paths (XY projection for 3D).

use std::fmt::Write as _;

use crate::geometry::{Config, Path, RigidBody, Workspace};

const WIDTH: f64 = 600.0;

struct View {
    min: [f64; 2],
    scale: f64,
    height: f64,
}

impl View {
    fn new(w: &Workspace) -> Self {
        let ext = w.bounds.extent();
        let scale = WIDTH / ext[0];
        View {
            min: [w.bounds.min[0], w.bounds.min[1]],
            scale,
            height: ext[1] * scale,
        }
    }

    fn x(&self, v: f64) -> f64 {
        (v - self.min[0]) * self.scale
    }

    fn y(&self, v: f64) -> f64 {
        self.height - (v - self.min[1]) * self.scale
    }

    fn point(&self, c: &[f64]) -> String {
        format!("{:.3},{:.3}", self.x(c[0]), self.y(c[1]))
    }
}

/// A path drawn as one polyline in `color`.
pub struct Stroke<'a> {
    pub path: &'a Path,
    pub color: &'a str,
}

/// Obstacles as filled rectangles, each path as a polyline with one vertex per state,
/// start/goal markers, and for rigid bodies the footprint at every state.
pub fn render_svg(
    w: &Workspace,
    strokes: &[Stroke],
    start: Option<&Config>,
    goal: Option<(&Config, f64)>,
    body: Option<&RigidBody>,
) -> String {
    let v = View::new(w);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{:.0}" viewBox="0 0 {WIDTH:.3} {:.3}">"#,
        v.height, v.height
    );
    let _ = writeln!(
        s,
        r##"<polygon points="0,0 {WIDTH:.3},0 {WIDTH:.3},{h:.3} 0,{h:.3}" fill="#ffffff" stroke="#000000"/>"##,
        h = v.height
    );
    for o in &w.obstacles {
        let _ = writeln!(
            s,
            r##"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="#808080"/>"##,
            v.x(o.min[0]),
            v.y(o.max[1]),
            (o.max[0] - o.min[0]) * v.scale,
            (o.max[1] - o.min[1]) * v.scale
        );
    }
    for st in strokes {
        if let Some(b) = body {
            for state in &st.path.states {
                let pts: Vec<String> = b
                    .placed(state.coords())
                    .iter()
                    .map(|p| v.point(p))
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<polygon points="{}" fill="none" stroke="{}" stroke-opacity="0.4"/>"#,
                    pts.join(" "),
                    st.color
                );
            }
        }
        let pts: Vec<String> = st.path.states.iter().map(|c| v.point(c.coords())).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            pts.join(" "),
            st.color
        );
    }
    if let Some(x) = start {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.3}" cy="{:.3}" r="5" fill="#00a000"/>"##,
            v.x(x[0]),
            v.y(x[1])
        );
    }
    if let Some((g, radius)) = goal {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.3}" cy="{:.3}" r="{:.3}" fill="#ffa500" fill-opacity="0.6"/>"##,
            v.x(g[0]),
            v.y(g[1]),
            (radius * v.scale).max(5.0)
        );
    }
    s.push_str("</svg>\n");
    s
}
