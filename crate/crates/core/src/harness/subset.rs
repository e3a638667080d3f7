//! A view of a multi-task dataset restricted to some of its tasks.

use crate::data::{TaskData, TaskKind, Targets};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TaskSubset<D> {
    inner: D,
    tasks: Vec<usize>,
}

impl<D: TaskData> TaskSubset<D> {
    pub fn new(inner: D, tasks: Vec<usize>) -> Result<Self> {
        if tasks.is_empty() || tasks.iter().any(|&t| t >= inner.num_tasks()) {
            return Err(Error::invalid(format!("task subset {tasks:?} of {} tasks", inner.num_tasks())));
        }
        Ok(Self { inner, tasks })
    }

    pub fn inner(&self) -> &D {
        &self.inner
    }
}

impl<D: TaskData> TaskData for TaskSubset<D> {
    fn images(&self) -> &Tensor<f32> {
        self.inner.images()
    }

    fn task_kinds(&self) -> Vec<TaskKind> {
        let all = self.inner.task_kinds();
        self.tasks.iter().map(|&t| all[t]).collect()
    }

    fn targets(&self, task: usize, idx: &[usize]) -> Targets {
        self.inner.targets(self.tasks[task], idx)
    }

    fn with_images(&self, images: Tensor<f32>) -> Result<Self> {
        Ok(Self {
            inner: self.inner.with_images(images)?,
            tasks: self.tasks.clone(),
        })
    }
}
