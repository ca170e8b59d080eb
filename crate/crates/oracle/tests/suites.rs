use gpushare_oracle::{verify_allocator, verify_deadline, verify_placement, ALLOCATOR_OPS};
use std::time::Instant;

#[test]
fn deadline_scheduler_matches_exhaustive_search() {
    let t = Instant::now();
    let r = verify_deadline(11, 1000);
    assert_eq!(r.instances, 1000);
    assert!(r.ok(), "{:#?}", r.failures.first());
    println!("deadline: {} instances in {:?}", r.instances, t.elapsed());
}

#[test]
fn placement_stays_within_bound_of_optimum() {
    let t = Instant::now();
    let r = verify_placement(11, 1000);
    assert!(r.ok(), "{:#?}", r.failures.first());
    println!("placement: {} instances in {:?}", r.instances, t.elapsed());
}

#[test]
fn allocator_invariants_hold_under_fuzzing() {
    let t = Instant::now();
    let r = verify_allocator(11, ALLOCATOR_OPS);
    let hard: Vec<_> = r.failures.iter().filter(|f| !f.detail.contains("packing:")).collect();
    assert!(hard.is_empty(), "{:#?}", hard.first());
    let p = r.packing.as_ref().unwrap();
    assert_eq!(p.checks, ALLOCATOR_OPS);
    println!("allocator: {} ops in {:?}; packing worse after {} checks, pages {} vs {}", r.instances, t.elapsed(), p.worse, p.mapped_sum, p.naive_sum);
}
