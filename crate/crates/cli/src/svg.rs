use std::fmt::Write;

use prcalc::grid::GridDomain;
use prcalc::{Error, Result};

const PALETTE: [&str; 10] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
    "#9c755f", "#bab0ac",
];

const CELL_PX: f64 = 8.0;

/// Renders a 2D label grid: one filled path per label, interface faces
/// stroked, `y` pointing up. `overlay` marks extra cells in outline.
pub fn render(dom: &GridDomain, labels: &[u32], overlay: Option<&[bool]>) -> Result<String> {
    if dom.dim != 2 {
        return Err(Error::Unsupported("render needs a 2D grid".into()));
    }
    let [nx, ny, _] = dom.extent;
    let (w, h) = (nx as f64 * CELL_PX, ny as f64 * CELL_PX);
    let top = |j: usize| (ny - j) as f64 * CELL_PX;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let max = labels.iter().copied().max().unwrap_or(0);
    for l in 0..=max {
        let mut d = String::new();
        for (i, _) in labels.iter().enumerate().filter(|(_, &x)| x == l) {
            let [x, y, _] = dom.coords(i);
            let _ = write!(d, "M{} {}h{CELL_PX}v{CELL_PX}h-{CELL_PX}z", x as f64 * CELL_PX, top(y + 1));
        }
        if !d.is_empty() {
            let fill = PALETTE[l as usize % PALETTE.len()];
            let _ = writeln!(s, r#"<path data-label="{l}" fill="{fill}" d="{d}"/>"#);
        }
    }
    let mut d = String::new();
    for f in dom.faces().filter(|f| labels[f.lo] != labels[f.hi]) {
        let [x, y, _] = dom.coords(f.hi);
        let (x, y) = (x as f64 * CELL_PX, top(y));
        if f.axis == 0 {
            let _ = write!(d, "M{x} {}v{CELL_PX}", y - CELL_PX);
        } else {
            let _ = write!(d, "M{x} {y}h{CELL_PX}");
        }
    }
    if !d.is_empty() {
        let _ = writeln!(s, r##"<path class="interface" fill="none" stroke="#000" stroke-width="1" d="{d}"/>"##);
    }
    if let Some(mark) = overlay {
        let mut d = String::new();
        for i in (0..dom.len()).filter(|&i| mark[i]) {
            let [x, y, _] = dom.coords(i);
            let _ = write!(d, "M{} {}h{CELL_PX}v{CELL_PX}h-{CELL_PX}z", x as f64 * CELL_PX, top(y + 1));
        }
        let _ = writeln!(
            s,
            r##"<path class="overlay" fill="none" stroke="#d00" stroke-width="0.5" d="{d}"/>"##
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_path_per_label_and_stroked_interface() {
        let dom = GridDomain::centered(2, 4, 0.25).unwrap();
        let labels: Vec<u32> = (0..16).map(|i| (dom.coords(i)[0] >= 2) as u32).collect();
        let s = render(&dom, &labels, None).unwrap();
        assert_eq!(s.matches("data-label=").count(), 2);
        assert_eq!(s.matches("class=\"interface\"").count(), 1);
        // four label-1 cells and four interface segments start at x = 16px
        assert_eq!(s.matches("M16 ").count(), 8);
        let d3 = GridDomain::centered(3, 2, 1.0).unwrap();
        assert!(render(&d3, &[0; 8], None).is_err());
    }
}
