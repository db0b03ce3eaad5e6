//! The 2×2×2 grid over `ood_distill`, `drw` and `sam_teacher`.

use super::{evaluate_student, train_student, train_teacher, EvalReport, StudentState, Workspace};
use crate::config::TrainConfig;
use crate::error::Result;
use crate::models::TeacherCnn;

pub const ABLATION_HEADER: &str = "ood_distill,drw,sam_teacher,acc_avg,acc_cls,acc_dist,head,mid,tail";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationRow {
    pub ood_distill: bool,
    pub drw: bool,
    pub sam_teacher: bool,
    pub report: EvalReport,
}

impl AblationRow {
    pub fn to_csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.ood_distill,
            self.drw,
            self.sam_teacher,
            r.averaged.overall,
            r.cls.overall,
            r.dist.overall,
            r.averaged.head,
            r.averaged.mid,
            r.averaged.tail
        )
    }
}

/// Trains one teacher per `sam_teacher` value and one student per grid cell,
/// sequentially, in lexicographic toggle order.
pub fn ablate(base: &TrainConfig, ws: &Workspace, on_row: &mut dyn FnMut(&AblationRow) -> Result<()>) -> Result<Vec<AblationRow>> {
    let mut teachers: [Option<TeacherCnn<f32>>; 2] = [None, None];
    let mut rows = Vec::with_capacity(8);
    for ood_distill in [false, true] {
        for drw in [false, true] {
            for sam_teacher in [false, true] {
                let mut cfg = base.clone();
                cfg.toggles.ood_distill = ood_distill;
                cfg.toggles.drw = drw;
                cfg.toggles.sam_teacher = sam_teacher;
                let slot = &mut teachers[sam_teacher as usize];
                if slot.is_none() {
                    *slot = Some(train_teacher(&cfg, ws, &mut |_, _| Ok(()))?);
                }
                let teacher = slot.as_ref().expect("teacher trained above");
                let mut state = StudentState::new(&cfg, &ws.seeds)?;
                train_student(&cfg, ws, teacher, &mut state, cfg.epochs, &mut |_, _| Ok(()))?;
                let row = AblationRow {
                    ood_distill,
                    drw,
                    sam_teacher,
                    report: evaluate_student(&state.student, &ws.eval, &ws.norm, &ws.ds.groups)?,
                };
                on_row(&row)?;
                rows.push(row);
            }
        }
    }
    Ok(rows)
}
