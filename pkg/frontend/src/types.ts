/** JSON shapes exchanged with the workbench service. */

export type Point = [number, number];

export type ElementSource = "predicted" | "human" | "imported";

export interface PolygonElement {
  id: string;
  type: "polygon";
  points: Point[];
  holes: Point[][];
  source: ElementSource;
  negative: boolean;
}

export interface AnnotationLayer {
  name: string;
  class_id: number;
  line_color: [number, number, number];
  elements: PolygonElement[];
}

export interface AnnotationDocument {
  slide_id: string;
  revision: number;
  layers: AnnotationLayer[];
}

export interface SlideMeta {
  slide_id: string;
  name: string;
  width0: number;
  height0: number;
  levels: number;
  tile_size: number;
  mpp: number | null;
  state: string;
}

export interface JobParams {
  tile_size?: number;
  overlap?: number;
  min_area_px?: number;
  epsilon_px?: number;
  full_grid?: boolean;
  layer_names?: string[] | null;
}

export interface JobRequest {
  slide_id: string;
  params?: JobParams;
  backend?: Record<string, unknown>;
}

export interface Job {
  job_id: string;
  slide_id: string;
  state: "queued" | "running" | "done" | "failed";
  progress: { done: number; total: number };
  params: Record<string, unknown>;
  started: number | null;
  finished: number | null;
  error: string | null;
  timing: Record<string, number> | null;
  warnings: string[];
}
