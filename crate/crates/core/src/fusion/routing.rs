use crate::data::Task;
use crate::fusion::block::Tower;

/// Static routing from a position's modality and the sequence's task to a
/// tower. Never looks at token values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RoutingTable {
    /// Whether motion positions of motion-to-motion tasks use the task tower.
    pub task_tower: bool,
}

impl RoutingTable {
    pub fn tag(&self, is_motion: bool, task: Option<Task>) -> Tower {
        match (is_motion, task) {
            (false, _) => Tower::Text,
            (true, Some(t)) if self.task_tower && t.is_motion_to_motion() => Tower::MotionTask,
            (true, _) => Tower::Motion,
        }
    }
}
