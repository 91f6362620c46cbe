//! Simulated pilot pool, first-fit scheduling, task launchers and the retry
//! rule for failed attempts.

mod executor;
mod pool;
mod retry;
mod scheduler;

pub use executor::{
    ExecError, Executor, FaultInjectingExecutor, FaultPlan, KernelCall, KernelFn, KernelOutput, KernelRegistry,
    KillSwitch, LaunchRequest, LocalExecutor, MockExecutor, RunningTask, TaskExit, EXIT_KILLED, EXIT_NOT_FOUND,
    KERNEL_PREFIX,
};
pub use pool::{allocate_pool, AllocationError, Placement, PoolState, ResourcePool, ResourceRequest};
pub use retry::{handle_task_failure, FailureAction, OnExhausted, RetryPolicy};
pub use scheduler::{peak_node_usage, schedule_ready_tasks, PoolNotActive, Schedule, TaskAssignment};
