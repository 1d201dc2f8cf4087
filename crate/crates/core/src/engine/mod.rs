//! Optimization: loss-weight schedules, Adam, direct snake fitting,
//! population training and checkpoints.

mod adam;
mod checkpoint;
mod objective;
mod schedule;
mod snake;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState, VecAdam};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use objective::{aux_pixel_loss, graph_loss, level_chamfer, GraphLoss, ObjectiveOptions, Targets};
pub use schedule::{schedule_weights, ScheduleConfig, ScheduleState};
pub use snake::{circle_init, snake_fit, snake_fit_from, SnakeConfig, SnakeFit};
pub use train::{
    prepare_items, train_log_header, train_population, LogRow, TrainConfig, TrainItem, TrainOutcome, TrainState,
    Trainer,
};
